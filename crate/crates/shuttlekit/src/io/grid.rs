//! Binary container for electrode basis-potential grids.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic            8  b"ITRAPGRD"
//! version          u32 = 1
//! n_dc             u32   dc electrode count
//! nx, ny, nz       u32 x 3
//! origin           f64 x 3  (m)
//! spacing          f64 x 3  (m)
//! ion mass         f64  (kg)
//! ion charge       f64  (C)
//! reference volt   f64  (V)
//! then n_dc + 1 records:
//!   kind           u8   0 = dc electrode, 1 = pseudopotential
//!   id             u32  dc index, or 0xFFFF_FFFF for the pseudopotential
//!   field          f64 x nx*ny*nz, z-fastest (index (ix*ny + iy)*nz + iz)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::trap::{sample_to_grids, BasisKind, ElectrodeBasis, GridField, TrapModel};

const MAGIC: &[u8; 8] = b"ITRAPGRD";
const VERSION: u32 = 1;
const PSEUDO_ID: u32 = u32::MAX;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Write all bases of `model`, sampled onto the given grid, to `path`.
pub fn export_basis_grids(
    model: &TrapModel,
    path: &Path,
    origin: Vector3<f64>,
    spacing: Vector3<f64>,
    shape: [usize; 3],
) -> Result<()> {
    let sampled = sample_to_grids(model, origin, spacing, shape)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(sampled.dc_bases.len() as u32)?;
    for n in shape {
        w.write_u32::<LittleEndian>(n as u32)?;
    }
    for v in [origin, spacing] {
        for a in 0..3 {
            w.write_f64::<LittleEndian>(v[a])?;
        }
    }
    w.write_f64::<LittleEndian>(sampled.ion_mass)?;
    w.write_f64::<LittleEndian>(sampled.ion_charge)?;
    w.write_f64::<LittleEndian>(sampled.dc_bases[0].reference_voltage)?;

    let write_record = |w: &mut BufWriter<File>, kind: u8, id: u32, field: &GridField| -> Result<()> {
        w.write_u8(kind)?;
        w.write_u32::<LittleEndian>(id)?;
        for v in &field.values {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    };
    for (j, basis) in sampled.dc_bases.iter().enumerate() {
        match &basis.kind {
            BasisKind::Grid(g) => write_record(&mut w, 0, j as u32, g)?,
            _ => unreachable!("sample_to_grids produces grid bases"),
        }
    }
    match &sampled.pseudopotential.kind {
        BasisKind::Grid(g) => write_record(&mut w, 1, PSEUDO_ID, g)?,
        _ => unreachable!(),
    }
    w.flush()?;
    Ok(())
}

/// Load a trap model whose bases are grid fields from `path`.
pub fn load_basis_grids(path: &Path) -> Result<TrapModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err(path, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(parse_err(path, "bad magic, not a basis-grid container"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(parse_err(path, format!("unsupported version {version}")));
    }
    let n_dc = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = [0usize; 3];
    for n in &mut shape {
        *n = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut origin = Vector3::zeros();
    let mut spacing = Vector3::zeros();
    for v in [&mut origin, &mut spacing] {
        for a in 0..3 {
            v[a] = r.read_f64::<LittleEndian>()?;
        }
    }
    let ion_mass = r.read_f64::<LittleEndian>()?;
    let ion_charge = r.read_f64::<LittleEndian>()?;
    let reference_voltage = r.read_f64::<LittleEndian>()?;

    let n_values = shape[0] * shape[1] * shape[2];
    if n_values == 0 || n_dc == 0 {
        return Err(parse_err(path, "empty grid or electrode set"));
    }

    let mut dc_bases: Vec<Option<ElectrodeBasis>> = vec![None; n_dc];
    let mut pseudo: Option<ElectrodeBasis> = None;
    let mut record = 0usize;
    loop {
        let kind = match r.read_u8() {
            Ok(k) => k,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let id = r.read_u32::<LittleEndian>()?;
        let mut values = vec![0.0; n_values];
        r.read_f64_into::<LittleEndian>(&mut values)
            .map_err(|_| parse_err(path, format!("record {record}: truncated field")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(
                path,
                format!("record {record}: non-finite field values"),
            ));
        }
        let field = GridField::new(origin, spacing, shape, values)
            .map_err(|e| parse_err(path, format!("record {record}: {e}")))?;
        match kind {
            0 => {
                let j = id as usize;
                if j >= n_dc {
                    return Err(parse_err(
                        path,
                        format!("record {record}: electrode id {j} out of range"),
                    ));
                }
                if dc_bases[j].is_some() {
                    return Err(parse_err(
                        path,
                        format!("record {record}: duplicate electrode id {j}"),
                    ));
                }
                dc_bases[j] = Some(ElectrodeBasis {
                    id: j,
                    kind: BasisKind::Grid(field),
                    reference_voltage,
                });
            }
            1 => {
                if pseudo.is_some() {
                    return Err(parse_err(path, "duplicate pseudopotential record"));
                }
                pseudo = Some(ElectrodeBasis {
                    id: usize::MAX,
                    kind: BasisKind::Grid(field),
                    reference_voltage: 1.0,
                });
            }
            k => {
                return Err(parse_err(path, format!("record {record}: unknown kind {k}")));
            }
        }
        record += 1;
    }

    let pseudopotential = pseudo.ok_or_else(|| parse_err(path, "pseudopotential record absent"))?;
    let dc_bases = dc_bases
        .into_iter()
        .enumerate()
        .map(|(j, b)| b.ok_or_else(|| parse_err(path, format!("electrode {j} record absent"))))
        .collect::<Result<Vec<_>>>()?;

    let model = TrapModel {
        dc_bases,
        pseudopotential,
        ion_mass,
        ion_charge,
    };
    model.validate()?;
    Ok(model)
}
