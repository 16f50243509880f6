//! Electrostatic trap model: per-electrode basis potentials plus the rf
//! pseudopotential, probed for value, gradient and Hessian at a point.
//!
//! The total potential at voltage vector `U` is
//! `Phi(r) = sum_j (U_j / U0_j) * Phi_j(r) + Phi_ps(r)`:
//! the dc part is linear in the voltages, the pseudopotential enters with
//! fixed unit weight.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};

/// 171Yb+ ion mass in kg.
pub const YB171_MASS: f64 = 170.936_330_2 * 1.660_539_066_60e-27;
/// 172Yb+ ion mass in kg.
pub const YB172_MASS: f64 = 171.936_385_9 * 1.660_539_066_60e-27;
/// Elementary charge in C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Value, gradient and Hessian of the potential at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialProbe {
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

impl PotentialProbe {
    pub fn zero() -> Self {
        PotentialProbe {
            value: 0.0,
            gradient: Vector3::zeros(),
            hessian: Matrix3::zeros(),
        }
    }

    fn add_scaled(&mut self, other: &PotentialProbe, w: f64) {
        self.value += w * other.value;
        self.gradient += w * other.gradient;
        self.hessian += w * other.hessian;
    }
}

/// Parameters of the analytic (separable Gaussian-in-x) electrode surrogate.
///
/// `Phi(r) = U0 * exp(-(x-x_c)^2 / (2 w^2)) * (1 + c_t (y^2 - z^2)/2 + c_z z)`
///
/// This shape does not satisfy the Laplace equation; it exists so that every
/// downstream constraint has closed-form derivatives to check against.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams {
    /// Axial center x_c in m.
    pub center_x: f64,
    /// Axial 1-sigma width w in m.
    pub axial_width: f64,
    /// Transverse curvature c_t in V/m^2 per reference volt.
    pub transverse_curvature: f64,
    /// Vertical tilt c_z in V/m per reference volt.
    pub vertical_tilt: f64,
}

/// 3-D scalar field on a rectilinear grid, z-fastest storage order.
#[derive(Debug, Clone)]
pub struct GridField {
    pub origin: Vector3<f64>,
    pub spacing: Vector3<f64>,
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(
        origin: Vector3<f64>,
        spacing: Vector3<f64>,
        shape: [usize; 3],
        values: Vec<f64>,
    ) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("grid spacing must be strictly positive on all axes"));
        }
        if shape.iter().any(|&n| n < 4) {
            return Err(invalid("grid needs at least 4 nodes per axis"));
        }
        if values.len() != shape[0] * shape[1] * shape[2] {
            return Err(invalid(format!(
                "grid value count {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid field contains non-finite values"));
        }
        Ok(GridField {
            origin,
            spacing,
            shape,
            values,
        })
    }

    #[inline]
    fn node(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[(ix * self.shape[1] + iy) * self.shape[2] + iz]
    }

    fn locate(&self, r: &Vector3<f64>) -> Result<([usize; 3], [f64; 3])> {
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let mut u = (r[a] - self.origin[a]) / self.spacing[a];
            let n = self.shape[a];
            if u < -1e-9 || u > (n - 1) as f64 + 1e-9 {
                return Err(Error::OutOfBounds(r.x, r.y, r.z));
            }
            // Snap to exact nodes so probes at node coordinates reproduce
            // the stored values bit for bit.
            if (u - u.round()).abs() < 1e-9 {
                u = u.round();
            }
            let c = (u.floor() as isize).clamp(0, n as isize - 2) as usize;
            cell[a] = c;
            frac[a] = (u - c as f64).clamp(0.0, 1.0);
        }
        Ok((cell, frac))
    }

    /// Probe via trilinear interpolation of nodal values and of nodal
    /// finite-difference derivatives (central stencils inside, one-sided
    /// second-order stencils on boundary nodes).
    fn probe(&self, r: &Vector3<f64>) -> Result<PotentialProbe> {
        let (cell, frac) = self.locate(r)?;

        let mut value = 0.0;
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();

        for dx in 0..2usize {
            for dy in 0..2usize {
                for dz in 0..2usize {
                    let w = blend(frac[0], dx) * blend(frac[1], dy) * blend(frac[2], dz);
                    if w == 0.0 {
                        continue;
                    }
                    let i = [cell[0] + dx, cell[1] + dy, cell[2] + dz];
                    value += w * self.node(i[0], i[1], i[2]);
                    for a in 0..3 {
                        grad[a] += w * self.stencil_1d(i, a, StencilKind::First);
                        for b in a..3 {
                            let h = if a == b {
                                self.stencil_1d(i, a, StencilKind::Second)
                            } else {
                                self.stencil_cross(i, a, b)
                            };
                            hess[(a, b)] += w * h;
                            if a != b {
                                hess[(b, a)] += w * h;
                            }
                        }
                    }
                }
            }
        }

        Ok(PotentialProbe {
            value,
            gradient: grad,
            hessian: hess,
        })
    }

    fn stencil_1d(&self, i: [usize; 3], axis: usize, kind: StencilKind) -> f64 {
        let taps = stencil_taps(self.shape[axis], i[axis], kind);
        let h = self.spacing[axis];
        let scale = match kind {
            StencilKind::First => 1.0 / h,
            StencilKind::Second => 1.0 / (h * h),
        };
        taps.iter()
            .map(|&(off, w)| {
                let mut j = i;
                j[axis] = (i[axis] as isize + off) as usize;
                w * self.node(j[0], j[1], j[2])
            })
            .sum::<f64>()
            * scale
    }

    fn stencil_cross(&self, i: [usize; 3], a: usize, b: usize) -> f64 {
        let ta = stencil_taps(self.shape[a], i[a], StencilKind::First);
        let tb = stencil_taps(self.shape[b], i[b], StencilKind::First);
        let scale = 1.0 / (self.spacing[a] * self.spacing[b]);
        let mut acc = 0.0;
        for &(oa, wa) in ta.iter() {
            for &(ob, wb) in tb.iter() {
                let mut j = i;
                j[a] = (i[a] as isize + oa) as usize;
                j[b] = (i[b] as isize + ob) as usize;
                acc += wa * wb * self.node(j[0], j[1], j[2]);
            }
        }
        acc * scale
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (self.shape[0] - 1) as f64 * self.spacing.x,
                (self.shape[1] - 1) as f64 * self.spacing.y,
                (self.shape[2] - 1) as f64 * self.spacing.z,
            )
    }
}

#[inline]
fn blend(t: f64, side: usize) -> f64 {
    if side == 0 {
        1.0 - t
    } else {
        t
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StencilKind {
    First,
    Second,
}

/// Finite-difference taps (offset, weight) without the 1/h^k scale.
/// Second-order accurate both inside and on boundary nodes.
fn stencil_taps(n: usize, i: usize, kind: StencilKind) -> Vec<(isize, f64)> {
    match kind {
        StencilKind::First => {
            if i == 0 {
                vec![(0, -1.5), (1, 2.0), (2, -0.5)]
            } else if i == n - 1 {
                vec![(0, 1.5), (-1, -2.0), (-2, 0.5)]
            } else {
                vec![(-1, -0.5), (1, 0.5)]
            }
        }
        StencilKind::Second => {
            if i == 0 {
                vec![(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)]
            } else if i == n - 1 {
                vec![(0, 2.0), (-1, -5.0), (-2, 4.0), (-3, -1.0)]
            } else {
                vec![(-1, 1.0), (0, -2.0), (1, 1.0)]
            }
        }
    }
}

/// The functional form of one basis potential.
#[derive(Debug, Clone)]
pub enum BasisKind {
    /// Sampled field on a rectilinear grid.
    Grid(GridField),
    /// Analytic Gaussian-in-x surrogate.
    Gaussian(GaussianParams),
    /// Uniform vertical field (correction electrode): `Phi = slope * z`.
    Tilt { slope: f64 },
    /// Radial harmonic bowl `Phi = c (y^2 + z^2) / 2`; used for the rf
    /// pseudopotential surrogate.
    RadialHarmonic { curvature: f64 },
}

/// One electrode's basis potential, normalized by its reference voltage.
#[derive(Debug, Clone)]
pub struct ElectrodeBasis {
    pub id: usize,
    pub kind: BasisKind,
    /// Voltage at which the basis field was computed; probes scale by
    /// `U / reference_voltage`.
    pub reference_voltage: f64,
}

impl ElectrodeBasis {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_voltage != 0.0) || !self.reference_voltage.is_finite() {
            return Err(invalid("reference voltage must be finite and nonzero"));
        }
        match &self.kind {
            BasisKind::Gaussian(p) => {
                if !(p.axial_width > 0.0) {
                    return Err(invalid("gaussian axial width must be positive"));
                }
                Ok(())
            }
            BasisKind::Grid(_) => Ok(()), // checked at construction
            BasisKind::Tilt { .. } | BasisKind::RadialHarmonic { .. } => Ok(()),
        }
    }

    /// Probe of the basis potential at its reference voltage.
    pub fn probe(&self, r: &Vector3<f64>) -> Result<PotentialProbe> {
        match &self.kind {
            BasisKind::Grid(g) => g.probe(r),
            BasisKind::Gaussian(p) => Ok(gaussian_probe(p, r)),
            BasisKind::Tilt { slope } => Ok(PotentialProbe {
                value: slope * r.z,
                gradient: Vector3::new(0.0, 0.0, *slope),
                hessian: Matrix3::zeros(),
            }),
            BasisKind::RadialHarmonic { curvature } => {
                let c = *curvature;
                let mut h = Matrix3::zeros();
                h[(1, 1)] = c;
                h[(2, 2)] = c;
                Ok(PotentialProbe {
                    value: 0.5 * c * (r.y * r.y + r.z * r.z),
                    gradient: Vector3::new(0.0, c * r.y, c * r.z),
                    hessian: h,
                })
            }
        }
    }

    /// Probe per applied volt.
    pub fn probe_per_volt(&self, r: &Vector3<f64>) -> Result<PotentialProbe> {
        let mut p = self.probe(r)?;
        let s = 1.0 / self.reference_voltage;
        p.value *= s;
        p.gradient *= s;
        p.hessian *= s;
        Ok(p)
    }
}

fn gaussian_probe(p: &GaussianParams, r: &Vector3<f64>) -> PotentialProbe {
    let dx = r.x - p.center_x;
    let w2 = p.axial_width * p.axial_width;
    let g = (-0.5 * dx * dx / w2).exp();
    let gp = -dx / w2 * g;
    let gpp = (dx * dx / (w2 * w2) - 1.0 / w2) * g;

    let ct = p.transverse_curvature;
    let cz = p.vertical_tilt;
    let t = 1.0 + 0.5 * ct * (r.y * r.y - r.z * r.z) + cz * r.z;
    let ty = ct * r.y;
    let tz = -ct * r.z + cz;

    let mut h = Matrix3::zeros();
    h[(0, 0)] = gpp * t;
    h[(1, 1)] = g * ct;
    h[(2, 2)] = -g * ct;
    h[(0, 1)] = gp * ty;
    h[(1, 0)] = gp * ty;
    h[(0, 2)] = gp * tz;
    h[(2, 0)] = gp * tz;
    // d2/dydz of t is zero.

    PotentialProbe {
        value: g * t,
        gradient: Vector3::new(gp * t, g * ty, g * tz),
        hessian: h,
    }
}

/// The full electrostatic environment: dc bases, pseudopotential, ion.
#[derive(Debug, Clone)]
pub struct TrapModel {
    pub dc_bases: Vec<ElectrodeBasis>,
    /// Pseudopotential basis; carried with frozen weight 1.
    pub pseudopotential: ElectrodeBasis,
    /// Ion mass in kg.
    pub ion_mass: f64,
    /// Ion charge in C.
    pub ion_charge: f64,
}

impl TrapModel {
    pub fn n_electrodes(&self) -> usize {
        self.dc_bases.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dc_bases.len() < 6 {
            return Err(invalid(
                "trap model needs at least 6 dc bases to satisfy the 6 constraint rows",
            ));
        }
        for b in &self.dc_bases {
            b.validate()?;
        }
        self.pseudopotential.validate()?;
        if !(self.ion_mass > 0.0) || !(self.ion_charge != 0.0) {
            return Err(invalid("ion mass must be positive and charge nonzero"));
        }
        Ok(())
    }

    /// Pseudopotential-only probe.
    pub fn probe_pseudo(&self, r: &Vector3<f64>) -> Result<PotentialProbe> {
        self.pseudopotential.probe(r)
    }

    /// Per-volt probe of dc basis `j`.
    pub fn probe_dc_basis(&self, j: usize, r: &Vector3<f64>) -> Result<PotentialProbe> {
        self.dc_bases[j].probe_per_volt(r)
    }

    /// Total potential probe at voltage vector `voltages`.
    pub fn probe(&self, voltages: &[f64], r: &Vector3<f64>) -> Result<PotentialProbe> {
        if voltages.len() != self.dc_bases.len() {
            return Err(invalid(format!(
                "voltage vector length {} does not match electrode count {}",
                voltages.len(),
                self.dc_bases.len()
            )));
        }
        if voltages.iter().any(|v| !v.is_finite()) {
            return Err(invalid("voltage vector contains non-finite entries"));
        }
        let mut acc = self.probe_pseudo(r)?;
        for (basis, &u) in self.dc_bases.iter().zip(voltages) {
            let p = basis.probe_per_volt(r)?;
            acc.add_scaled(&p, u);
        }
        Ok(acc)
    }

    /// Axial center of toy-trap segment `j`, if the basis is analytic.
    pub fn segment_center(&self, j: usize) -> Option<f64> {
        match self.dc_bases.get(j)?.kind {
            BasisKind::Gaussian(ref p) => Some(p.center_x),
            _ => None,
        }
    }
}

/// Default radial pseudopotential curvature in V/m^2 (about 2*pi*500 kHz for
/// 171Yb+).
pub const TOY_PSEUDO_CURVATURE: f64 = 1.75e7;

/// Build an analytic test trap: `n_segments` Gaussian electrode bases spaced
/// by `pitch` plus one vertical-tilt correction electrode, and a radial
/// harmonic pseudopotential centered on the trap axis.
pub fn make_toy_trap(
    n_segments: usize,
    pitch: f64,
    width: f64,
    curvature: f64,
    tilt: f64,
) -> Result<TrapModel> {
    if n_segments < 6 {
        return Err(invalid("toy trap needs at least 6 segments"));
    }
    if !(pitch > 0.0) || !(width > 0.0) {
        return Err(invalid("pitch and width must be positive"));
    }
    let mut dc_bases: Vec<ElectrodeBasis> = (0..n_segments)
        .map(|j| ElectrodeBasis {
            id: j,
            kind: BasisKind::Gaussian(GaussianParams {
                center_x: j as f64 * pitch,
                axial_width: width,
                transverse_curvature: curvature,
                vertical_tilt: tilt,
            }),
            reference_voltage: 1.0,
        })
        .collect();
    // Correction electrode: pure vertical field.
    dc_bases.push(ElectrodeBasis {
        id: n_segments,
        kind: BasisKind::Tilt {
            slope: if tilt != 0.0 { tilt } else { 100.0 },
        },
        reference_voltage: 1.0,
    });

    let model = TrapModel {
        dc_bases,
        pseudopotential: ElectrodeBasis {
            id: usize::MAX,
            kind: BasisKind::RadialHarmonic {
                curvature: TOY_PSEUDO_CURVATURE,
            },
            reference_voltage: 1.0,
        },
        ion_mass: YB171_MASS,
        ion_charge: ELEMENTARY_CHARGE,
    };
    model.validate()?;
    Ok(model)
}

/// Sample every basis of `model` onto a rectilinear grid, producing a model
/// whose bases are all grid-kind. Used by the grid exporter and by the
/// derivative-convergence tests.
pub fn sample_to_grids(
    model: &TrapModel,
    origin: Vector3<f64>,
    spacing: Vector3<f64>,
    shape: [usize; 3],
) -> Result<TrapModel> {
    let sample = |basis: &ElectrodeBasis| -> Result<ElectrodeBasis> {
        let mut values = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for ix in 0..shape[0] {
            for iy in 0..shape[1] {
                for iz in 0..shape[2] {
                    let r = Vector3::new(
                        origin.x + ix as f64 * spacing.x,
                        origin.y + iy as f64 * spacing.y,
                        origin.z + iz as f64 * spacing.z,
                    );
                    values.push(basis.probe(&r)?.value);
                }
            }
        }
        Ok(ElectrodeBasis {
            id: basis.id,
            kind: BasisKind::Grid(GridField::new(origin, spacing, shape, values)?),
            reference_voltage: basis.reference_voltage,
        })
    };
    Ok(TrapModel {
        dc_bases: model
            .dc_bases
            .iter()
            .map(sample)
            .collect::<Result<Vec<_>>>()?,
        pseudopotential: sample(&model.pseudopotential)?,
        ion_mass: model.ion_mass,
        ion_charge: model.ion_charge,
    })
}
