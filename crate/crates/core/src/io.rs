//! Field containers: a one-line JSON header followed by a flat
//! little-endian `f64` block.
//!
//! `.pfield` layout is spatial-major, then direction (phi fastest), then
//! energy — the same flattening as [`PhaseGrid::index`]. `.bfield` stores
//! inflow-boundary samples with the inflow mask in the header.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryQuadrature, ConvexDomain};
use crate::num;
use crate::phase::{EnergyInterval, PhaseField, PhaseGrid};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PFieldHeader {
    pub magic: String,
    pub version: u32,
    pub name: String,
    pub dtype: String,
    pub endianness: String,
    /// Node counts per axis group: `[spatial, directions, energies]`.
    pub dims: [usize; 3],
    /// Spatial lattice shape and geometry for reconstruction.
    pub lattice: [usize; 3],
    pub origin: [f64; 3],
    pub cell_size: f64,
    pub sphere: [usize; 2],
    pub energy_interval: [f64; 2],
    pub domain: DomainSpec,
    /// Spatial node flat lattice indices (inside cells only).
    pub spatial_cells: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainSpec {
    Ball { center: [f64; 3], radius: f64 },
}

impl DomainSpec {
    pub fn to_domain(&self) -> ConvexDomain {
        match self {
            DomainSpec::Ball { center, radius } => ConvexDomain::ball(*center, *radius),
        }
    }

    pub fn from_domain(domain: &ConvexDomain) -> Result<Self> {
        match domain {
            ConvexDomain::Ball { center, radius } => Ok(DomainSpec::Ball {
                center: *center,
                radius: *radius,
            }),
            ConvexDomain::Implicit { .. } => Err(Error::Format(
                "implicit domains have no serializable spec".into(),
            )),
        }
    }
}

/// Writes a sampled phase field: JSON header line, then the value block.
pub fn write_pfield(path: &Path, field: &PhaseField) -> Result<()> {
    let (grid, values) = match field {
        PhaseField::Sampled { grid, values, .. } => (grid.clone(), values.clone()),
        PhaseField::Closure { .. } => {
            return Err(Error::Format(
                "only sampled fields can be persisted; sample onto a grid first".into(),
            ))
        }
    };
    let header = PFieldHeader {
        magic: "pfield".into(),
        version: 1,
        name: field.name(),
        dtype: "f64".into(),
        endianness: "little".into(),
        dims: [
            grid.spatial.len(),
            grid.sphere.len(),
            grid.energies.len(),
        ],
        lattice: grid.lattice,
        origin: grid.origin,
        cell_size: grid.cell_size,
        sphere: [grid.sphere.n_phi, grid.sphere.n_theta],
        energy_interval: [grid.interval.min, grid.interval.max],
        domain: DomainSpec::from_domain(&grid.domain)?,
        spatial_cells: grid
            .spatial
            .iter()
            .map(|n| {
                ((n.cell[0] * grid.lattice[1] + n.cell[1]) * grid.lattice[2] + n.cell[2]) as u32
            })
            .collect(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header).map_err(|e| Error::Format(e.to_string()))?;
    file.write_all(b"\n")?;
    for v in values.iter() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a `.pfield` back into a sampled field; the grid is rebuilt from
/// the header geometry and validated against the stored cell list.
pub fn read_pfield(path: &Path) -> Result<PhaseField> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: PFieldHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
    if header.magic != "pfield" || header.dtype != "f64" || header.endianness != "little" {
        return Err(Error::Format("unrecognized pfield header".into()));
    }
    let domain = header.domain.to_domain();
    let grid = PhaseGrid::new(
        &domain,
        header.lattice[0],
        header.sphere[0],
        header.sphere[1],
        header.dims[2],
        EnergyInterval::new(header.energy_interval[0], header.energy_interval[1])?,
    )?;
    if grid.spatial.len() != header.dims[0] {
        return Err(Error::Format(format!(
            "grid reconstruction mismatch: {} spatial nodes vs header {}",
            grid.spatial.len(),
            header.dims[0]
        )));
    }
    for (node, cell) in grid.spatial.iter().zip(&header.spatial_cells) {
        let flat =
            ((node.cell[0] * grid.lattice[1] + node.cell[1]) * grid.lattice[2] + node.cell[2]) as u32;
        if flat != *cell {
            return Err(Error::Format("spatial cell list mismatch".into()));
        }
    }
    let count = header.dims[0] * header.dims[1] * header.dims[2];
    let mut buf = vec![0u8; count * 8];
    reader.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PhaseField::sampled(Arc::new(grid), values, header.name)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct BFieldHeader {
    pub magic: String,
    pub version: u32,
    pub name: String,
    pub dtype: String,
    pub endianness: String,
    pub domain: DomainSpec,
    /// Boundary chart resolution `[n_phi, n_theta]` (points and directions).
    pub chart: [usize; 2],
    pub energies: Vec<f64>,
    /// Inflow mask over `(point, direction)` pairs, direction fastest;
    /// 1 marks `omega . nu < 0`. Values are stored for masked pairs only.
    pub inflow_mask: Vec<u8>,
}

/// Writes samples of a boundary field on the inflow-masked product
/// quadrature: values ordered `(point, direction, energy)` with masked-out
/// pairs skipped.
pub fn write_bfield(
    path: &Path,
    domain: &ConvexDomain,
    quad: &BoundaryQuadrature,
    energies: &[f64],
    field: &crate::phase::BoundaryField,
) -> Result<()> {
    let mut mask = Vec::with_capacity(quad.points.len() * quad.directions.len());
    let mut values = Vec::new();
    for p in &quad.points {
        for omega in &quad.directions.nodes {
            let inflow = num::dot(*omega, p.normal) < 0.0;
            mask.push(u8::from(inflow));
            if inflow {
                for &e in energies {
                    values.push(field.eval(p.position, *omega, e));
                }
            }
        }
    }
    let header = BFieldHeader {
        magic: "bfield".into(),
        version: 1,
        name: field.name.clone(),
        dtype: "f64".into(),
        endianness: "little".into(),
        domain: DomainSpec::from_domain(domain)?,
        chart: [quad.directions.n_phi, quad.directions.n_theta],
        energies: energies.to_vec(),
        inflow_mask: mask,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header).map_err(|e| Error::Format(e.to_string()))?;
    file.write_all(b"\n")?;
    for v in &values {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a `.bfield`: returns the header and the masked value block.
pub fn read_bfield(path: &Path) -> Result<(BFieldHeader, Vec<f64>)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: BFieldHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
    if header.magic != "bfield" {
        return Err(Error::Format("unrecognized bfield header".into()));
    }
    let inflow_pairs = header.inflow_mask.iter().filter(|m| **m == 1).count();
    let mut buf = vec![0u8; inflow_pairs * header.energies.len() * 8];
    reader.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}
