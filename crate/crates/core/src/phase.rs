//! Discretization of `G x S x I`, field storage/evaluation, quadrature, and
//! the norms and seminorms used by the solvers and diagnostics.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryQuadrature, ConvexDomain, SphereChart};
use crate::num::{self, pairwise_sum, V3};

/// Energy interval `I = [E0, Em]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyInterval {
    pub min: f64,
    pub max: f64,
}

impl EnergyInterval {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(max > min) {
            return Err(Error::InvalidArgument(format!(
                "degenerate energy interval [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    /// `m(I)`, the interval length.
    pub fn measure(&self) -> f64 {
        self.max - self.min
    }
}

/// Weighted spatial node. Cells straddling the boundary carry the inside
/// fraction of their volume and place the node at the centroid of the inside
/// subcells (inside `G` by convexity).
#[derive(Debug, Clone, Copy)]
pub struct SpatialNode {
    pub position: V3,
    pub weight: f64,
    /// Lattice index of the owning cell, `(i1, i2, i3)`.
    pub cell: [usize; 3],
    /// True when the full cell lies inside `G`.
    pub interior: bool,
}

/// Tensor-product discretization of `G x S x I`.
///
/// Spatial nodes are cell-centered on a lattice clipped to `G`; directions
/// live on a [`SphereChart`]; energy nodes are midpoints of a uniform
/// partition of `I`, so every node is strictly interior to the interval.
#[derive(Clone)]
pub struct PhaseGrid {
    pub domain: ConvexDomain,
    pub interval: EnergyInterval,
    pub spatial: Vec<SpatialNode>,
    pub sphere: SphereChart,
    pub energies: Vec<f64>,
    pub energy_weight: f64,
    /// Lattice shape per spatial axis.
    pub lattice: [usize; 3],
    /// Lattice origin (lower corner of the bounding box) and cell size.
    pub origin: V3,
    pub cell_size: f64,
    /// Map from flattened lattice index to `spatial` index.
    cell_to_node: Vec<Option<u32>>,
}

/// Subcell resolution for boundary-cell volume fractions.
const SUBCELLS: usize = 6;

impl PhaseGrid {
    /// Builds the grid: `n_x` cells per spatial axis over the domain's
    /// bounding box, `(n_phi, n_theta)` chart cells, `n_e` energy cells.
    pub fn new(
        domain: &ConvexDomain,
        n_x: usize,
        n_phi: usize,
        n_theta: usize,
        n_e: usize,
        interval: EnergyInterval,
    ) -> Result<Self> {
        if n_x < 2 || n_phi < 2 || n_theta < 2 || n_e < 1 {
            return Err(Error::InvalidArgument(
                "grid needs at least 2 cells per spatial/angular axis".into(),
            ));
        }
        let (origin, extent) = match domain {
            ConvexDomain::Ball { center, radius } => {
                ([center[0] - radius, center[1] - radius, center[2] - radius], 2.0 * radius)
            }
            ConvexDomain::Implicit { bounding_radius, .. } => {
                ([-bounding_radius, -bounding_radius, -bounding_radius], 2.0 * bounding_radius)
            }
        };
        let h = extent / n_x as f64;
        let mut spatial = Vec::new();
        let mut cell_to_node = vec![None; n_x * n_x * n_x];
        let sub_h = h / SUBCELLS as f64;
        for i1 in 0..n_x {
            for i2 in 0..n_x {
                for i3 in 0..n_x {
                    let lo = [
                        origin[0] + i1 as f64 * h,
                        origin[1] + i2 as f64 * h,
                        origin[2] + i3 as f64 * h,
                    ];
                    let center = [lo[0] + 0.5 * h, lo[1] + 0.5 * h, lo[2] + 0.5 * h];
                    // Classify by cell corners first: all inside / all outside
                    // cells skip the subcell scan.
                    let mut corners_in = 0;
                    for c in 0..8 {
                        let p = [
                            lo[0] + ((c & 1) as f64) * h,
                            lo[1] + (((c >> 1) & 1) as f64) * h,
                            lo[2] + (((c >> 2) & 1) as f64) * h,
                        ];
                        if domain.inside(p) {
                            corners_in += 1;
                        }
                    }
                    let (node, weight, interior) = if corners_in == 8 {
                        (center, h * h * h, true)
                    } else {
                        // Straddling (or fully outside) cell: estimate the
                        // inside volume fraction and centroid by subcells.
                        let mut count = 0usize;
                        let mut centroid = [0.0; 3];
                        for s1 in 0..SUBCELLS {
                            for s2 in 0..SUBCELLS {
                                for s3 in 0..SUBCELLS {
                                    let p = [
                                        lo[0] + (s1 as f64 + 0.5) * sub_h,
                                        lo[1] + (s2 as f64 + 0.5) * sub_h,
                                        lo[2] + (s3 as f64 + 0.5) * sub_h,
                                    ];
                                    if domain.inside(p) {
                                        count += 1;
                                        centroid = num::add(centroid, p);
                                    }
                                }
                            }
                        }
                        if count == 0 {
                            continue;
                        }
                        let frac = count as f64 / (SUBCELLS * SUBCELLS * SUBCELLS) as f64;
                        (
                            num::scale(1.0 / count as f64, centroid),
                            h * h * h * frac,
                            false,
                        )
                    };
                    let flat = (i1 * n_x + i2) * n_x + i3;
                    cell_to_node[flat] = Some(spatial.len() as u32);
                    spatial.push(SpatialNode {
                        position: node,
                        weight,
                        cell: [i1, i2, i3],
                        interior,
                    });
                }
            }
        }
        let de = interval.measure() / n_e as f64;
        let energies = (0..n_e)
            .map(|k| interval.min + (k as f64 + 0.5) * de)
            .collect();
        Ok(Self {
            domain: domain.clone(),
            interval,
            spatial,
            sphere: SphereChart::new(n_phi, n_theta),
            energies,
            energy_weight: de,
            lattice: [n_x, n_x, n_x],
            origin,
            cell_size: h,
            cell_to_node,
        })
    }

    pub fn node_count(&self) -> usize {
        self.spatial.len() * self.sphere.len() * self.energies.len()
    }

    /// Flat index layout: spatial-major, then direction (phi fastest), then
    /// energy — the `.pfield` container order.
    #[inline]
    pub fn index(&self, ix: usize, iw: usize, ie: usize) -> usize {
        (ix * self.sphere.len() + iw) * self.energies.len() + ie
    }

    pub fn node_at(&self, cell: [usize; 3]) -> Option<&SpatialNode> {
        let [n1, n2, n3] = self.lattice;
        if cell[0] >= n1 || cell[1] >= n2 || cell[2] >= n3 {
            return None;
        }
        let flat = (cell[0] * n2 + cell[1]) * n3 + cell[2];
        self.cell_to_node[flat].map(|i| &self.spatial[i as usize])
    }

    pub fn node_index_at(&self, cell: [usize; 3]) -> Option<usize> {
        let [n1, n2, n3] = self.lattice;
        if cell[0] >= n1 || cell[1] >= n2 || cell[2] >= n3 {
            return None;
        }
        let flat = (cell[0] * n2 + cell[1]) * n3 + cell[2];
        self.cell_to_node[flat].map(|i| i as usize)
    }

    /// Total quadrature weight; converges to `|G| * 4 pi * m(I)` under
    /// refinement.
    pub fn total_weight(&self) -> f64 {
        let sx: f64 = pairwise_sum(&self.spatial.iter().map(|n| n.weight).collect::<Vec<_>>());
        let sw = pairwise_sum(&self.sphere.weights);
        sx * sw * self.energy_weight * self.energies.len() as f64
    }
}

type FieldFn = Arc<dyn Fn(V3, V3, f64) -> f64 + Send + Sync>;

/// A real-valued field on `G x S x I`, backed either by samples on a
/// [`PhaseGrid`] or by a closure evaluable at arbitrary phase points.
#[derive(Clone)]
pub enum PhaseField {
    Sampled {
        grid: Arc<PhaseGrid>,
        values: Arc<Vec<f64>>,
        name: String,
    },
    Closure {
        eval: FieldFn,
        name: String,
    },
}

impl std::fmt::Debug for PhaseField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseField::Sampled { grid, name, .. } => f
                .debug_struct("PhaseField::Sampled")
                .field("name", name)
                .field("nodes", &grid.node_count())
                .finish(),
            PhaseField::Closure { name, .. } => f
                .debug_struct("PhaseField::Closure")
                .field("name", name)
                .finish(),
        }
    }
}

impl PhaseField {
    pub fn closure(name: impl Into<String>, eval: impl Fn(V3, V3, f64) -> f64 + Send + Sync + 'static) -> Self {
        PhaseField::Closure {
            eval: Arc::new(eval),
            name: name.into(),
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::closure(format!("const({value})"), move |_, _, _| value)
    }

    pub fn sampled(grid: Arc<PhaseGrid>, values: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::Data(format!(
                "sampled backing length {} != grid node count {}",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(PhaseField::Sampled {
            grid,
            values: Arc::new(values),
            name: name.into(),
        })
    }

    /// Samples any field onto a grid.
    pub fn sample_onto(&self, grid: Arc<PhaseGrid>) -> Result<PhaseField> {
        let values = sample_values(self, &grid);
        PhaseField::sampled(grid, values, self.name())
    }

    pub fn name(&self) -> String {
        match self {
            PhaseField::Sampled { name, .. } | PhaseField::Closure { name, .. } => name.clone(),
        }
    }

    /// Evaluates the field. Sampled fields interpolate multilinearly:
    /// trilinear in `x`, bilinear in the chart angles (periodic in phi),
    /// linear in `E`, with clamping at the axis ends.
    pub fn eval(&self, x: V3, omega: V3, e: f64) -> f64 {
        match self {
            PhaseField::Closure { eval, .. } => eval(x, omega, e),
            PhaseField::Sampled { grid, values, .. } => interpolate(grid, values, x, omega, e),
        }
    }

    pub fn grid(&self) -> Option<&Arc<PhaseGrid>> {
        match self {
            PhaseField::Sampled { grid, .. } => Some(grid),
            PhaseField::Closure { .. } => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            PhaseField::Sampled { values, .. } => Some(values),
            PhaseField::Closure { .. } => None,
        }
    }
}

fn sample_values(field: &PhaseField, grid: &PhaseGrid) -> Vec<f64> {
    let n_w = grid.sphere.len();
    let n_e = grid.energies.len();
    let per_x: Vec<Vec<f64>> = grid
        .spatial
        .par_iter()
        .map(|sn| {
            let mut chunk = Vec::with_capacity(n_w * n_e);
            for iw in 0..n_w {
                let w = grid.sphere.nodes[iw];
                for ie in 0..n_e {
                    chunk.push(field.eval(sn.position, w, grid.energies[ie]));
                }
            }
            chunk
        })
        .collect();
    per_x.into_iter().flatten().collect()
}

/// Multilinear interpolation of grid samples; clamps spatial/energy lookups
/// to the lattice and wraps phi.
fn interpolate(grid: &PhaseGrid, values: &[f64], x: V3, omega: V3, e: f64) -> f64 {
    let [n1, _, _] = grid.lattice;
    let h = grid.cell_size;
    // Fractional lattice coordinates relative to cell centers.
    let mut idx = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for j in 0..3 {
        let u = (x[j] - grid.origin[j]) / h - 0.5;
        let clamped = u.clamp(0.0, (n1 - 1) as f64);
        let i0 = (clamped.floor() as usize).min(n1 - 2);
        idx[j] = i0;
        frac[j] = (clamped - i0 as f64).clamp(0.0, 1.0);
    }
    let (phi, theta) = SphereChart::unmap(omega);
    let n_phi = grid.sphere.n_phi;
    let n_theta = grid.sphere.n_theta;
    let dphi = 2.0 * PI / n_phi as f64;
    let dtheta = PI / n_theta as f64;
    let up = phi / dphi - 0.5;
    let ip0 = up.floor();
    let fp = up - ip0;
    let ip0 = ip0.rem_euclid(n_phi as f64) as usize % n_phi;
    let ip1 = (ip0 + 1) % n_phi;
    let ut = (theta / dtheta - 0.5).clamp(0.0, (n_theta - 1) as f64);
    let it0 = (ut.floor() as usize).min(n_theta.saturating_sub(2));
    let ft = (ut - it0 as f64).clamp(0.0, 1.0);
    let it1 = (it0 + 1).min(n_theta - 1);
    let n_e = grid.energies.len();
    let (ie0, ie1, fe) = if n_e == 1 {
        (0, 0, 0.0)
    } else {
        let de = grid.energy_weight;
        let ue = ((e - grid.interval.min) / de - 0.5).clamp(0.0, (n_e - 1) as f64);
        let ie0 = (ue.floor() as usize).min(n_e - 2);
        (ie0, ie0 + 1, (ue - ie0 as f64).clamp(0.0, 1.0))
    };

    // Gather the spatial corners, falling back to the nearest existing node
    // when a lattice cell has no inside part.
    let mut acc = 0.0;
    for (ci, cf) in [(0usize, 1.0 - frac[0]), (1, frac[0])] {
        for (cj, cg) in [(0usize, 1.0 - frac[1]), (1, frac[1])] {
            for (ck, ch) in [(0usize, 1.0 - frac[2]), (1, frac[2])] {
                let wx = cf * cg * ch;
                if wx == 0.0 {
                    continue;
                }
                let cell = [idx[0] + ci, idx[1] + cj, idx[2] + ck];
                let ix = grid
                    .node_index_at(cell)
                    .or_else(|| nearest_node(grid, cell))
                    .expect("grid has at least one node");
                let mut aw = 0.0;
                for (iw, wf) in [(it0 * n_phi + ip0, (1.0 - fp) * (1.0 - ft)),
                    (it0 * n_phi + ip1, fp * (1.0 - ft)),
                    (it1 * n_phi + ip0, (1.0 - fp) * ft),
                    (it1 * n_phi + ip1, fp * ft)]
                {
                    if wf == 0.0 {
                        continue;
                    }
                    let v0 = values[grid.index(ix, iw, ie0)];
                    let v1 = values[grid.index(ix, iw, ie1)];
                    aw += wf * ((1.0 - fe) * v0 + fe * v1);
                }
                acc += wx * aw;
            }
        }
    }
    acc
}

fn nearest_node(grid: &PhaseGrid, cell: [usize; 3]) -> Option<usize> {
    // Spiral outward along the axes until an inside cell is found.
    for radius in 1..grid.lattice[0] {
        for d1 in -(radius as isize)..=(radius as isize) {
            for d2 in -(radius as isize)..=(radius as isize) {
                for d3 in -(radius as isize)..=(radius as isize) {
                    if d1.abs().max(d2.abs()).max(d3.abs()) != radius as isize {
                        continue;
                    }
                    let c = [
                        cell[0] as isize + d1,
                        cell[1] as isize + d2,
                        cell[2] as isize + d3,
                    ];
                    if c.iter().all(|&v| v >= 0) {
                        if let Some(i) =
                            grid.node_index_at([c[0] as usize, c[1] as usize, c[2] as usize])
                        {
                            return Some(i);
                        }
                    }
                }
            }
        }
    }
    None
}

/// Weight selector for trace norms on the inflow boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceWeight {
    /// Plain `T^2(Gamma_-)` with measure `|omega.nu| dsigma domega dE`.
    Unit,
    /// `T^2_{tau-}`: extra factor `tau_-(y, omega)`.
    TauMinus,
    /// `T^2_{m_1j}`: escape-gradient weight in `x_j`, `j` in `0..3`.
    M1(usize),
    /// `T^2_{m_2j}`: escape-gradient weight in angle `j`, `j` in `0..2`.
    M2(usize),
}

type BoundaryFn = Arc<dyn Fn(V3, V3, f64) -> f64 + Send + Sync>;

/// Field on the inflow boundary `Gamma_-`, evaluable at `(y, omega, E)` with
/// `omega . nu(y) < 0`.
#[derive(Clone)]
pub struct BoundaryField {
    pub eval: BoundaryFn,
    /// Optional energy derivative, used by compatibility checks and the
    /// shifted source assembly; falls back to centered differences.
    pub d_energy: Option<BoundaryFn>,
    /// Optional surface gradient `grad_{dG} g(y, omega, E)` (a tangent
    /// 3-vector), needed by the `q3` decomposition term.
    pub surface_gradient: Option<Arc<dyn Fn(V3, V3, f64) -> V3 + Send + Sync>>,
    pub name: String,
}

impl BoundaryField {
    pub fn new(name: impl Into<String>, eval: impl Fn(V3, V3, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            d_energy: None,
            surface_gradient: None,
            name: name.into(),
        }
    }

    pub fn constant(v: f64) -> Self {
        Self::new(format!("const({v})"), move |_, _, _| v)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn with_d_energy(mut self, d: impl Fn(V3, V3, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.d_energy = Some(Arc::new(d));
        self
    }

    pub fn with_surface_gradient(
        mut self,
        g: impl Fn(V3, V3, f64) -> V3 + Send + Sync + 'static,
    ) -> Self {
        self.surface_gradient = Some(Arc::new(g));
        self
    }

    pub fn eval(&self, y: V3, omega: V3, e: f64) -> f64 {
        (self.eval)(y, omega, e)
    }

    /// Energy derivative; centered finite difference when not declared.
    pub fn d_energy(&self, y: V3, omega: V3, e: f64, interval: EnergyInterval) -> f64 {
        if let Some(d) = &self.d_energy {
            return d(y, omega, e);
        }
        let h = 1e-5 * interval.measure();
        let ep = (e + h).min(interval.max);
        let em = (e - h).max(interval.min);
        ((self.eval)(y, omega, ep) - (self.eval)(y, omega, em)) / (ep - em)
    }
}

/// `L^2(G x S x I)` norm by grid quadrature.
pub fn l2_norm(grid: &PhaseGrid, field: &PhaseField) -> Result<f64> {
    inner_product(grid, field, field).map(|v| v.sqrt())
}

/// `L^2` inner product `<f, g>` by grid quadrature.
pub fn inner_product(grid: &PhaseGrid, f: &PhaseField, g: &PhaseField) -> Result<f64> {
    let n_w = grid.sphere.len();
    let n_e = grid.energies.len();
    let per_x: Vec<f64> = grid
        .spatial
        .par_iter()
        .map(|sn| {
            let mut vals = Vec::with_capacity(n_w * n_e);
            for (w, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
                for &e in &grid.energies {
                    let fv = f.eval(sn.position, *w, e);
                    let gv = g.eval(sn.position, *w, e);
                    vals.push(sn.weight * ww * grid.energy_weight * fv * gv);
                }
            }
            pairwise_sum(&vals)
        })
        .collect();
    let total = pairwise_sum(&per_x);
    if !total.is_finite() {
        return Err(Error::Data("NaN or Inf encountered in quadrature".into()));
    }
    Ok(total)
}

/// Weighted trace norm on `Gamma_-`:
/// `sqrt( sum w |g|^2 * weight * |omega.nu| )` over the inflow-masked
/// boundary quadrature and the energy axis.
pub fn trace_norm(
    domain: &ConvexDomain,
    quad: &BoundaryQuadrature,
    energies: (&[f64], f64),
    field: &BoundaryField,
    weight: TraceWeight,
) -> Result<f64> {
    let (e_nodes, e_w) = energies;
    let mut vals = Vec::new();
    for p in &quad.points {
        for (omega, ww) in quad.directions.nodes.iter().zip(&quad.directions.weights) {
            let mu = num::dot(*omega, p.normal);
            if mu >= 0.0 {
                continue;
            }
            // The m1 ball closed form carries 1/|omega.nu|, so the measure
            // factor is folded in analytically rather than multiplied late.
            let weighted_measure = match weight {
                TraceWeight::Unit => mu.abs(),
                TraceWeight::TauMinus => {
                    domain.boundary_escape_time(p.position, *omega)? * mu.abs()
                }
                TraceWeight::M1(j) => crate::diagnostics::weight_m_times_measure(
                    domain,
                    crate::diagnostics::WeightKind::M1,
                    j,
                    p.position,
                    *omega,
                )?,
                TraceWeight::M2(j) => crate::diagnostics::weight_m_times_measure(
                    domain,
                    crate::diagnostics::WeightKind::M2,
                    j,
                    p.position,
                    *omega,
                )?,
            };
            if !weighted_measure.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite trace weight at y={:?}, omega={omega:?}",
                    p.position
                )));
            }
            for &e in e_nodes {
                let g = field.eval(p.position, *omega, e);
                vals.push(p.weight * ww * e_w * weighted_measure * g * g);
            }
        }
    }
    let total = pairwise_sum(&vals);
    if !total.is_finite() {
        return Err(Error::Data("NaN encountered in trace quadrature".into()));
    }
    Ok(total.sqrt())
}

/// Norm of the `E = Em` slice of a boundary field in `T^2(Gamma'_-)`
/// (no energy measure) — the natural size of a compatibility defect.
pub fn trace_slice_norm(
    quad: &BoundaryQuadrature,
    field: impl Fn(V3, V3) -> f64,
) -> f64 {
    let mut vals = Vec::new();
    for p in &quad.points {
        for (omega, ww) in quad.directions.nodes.iter().zip(&quad.directions.weights) {
            let mu = num::dot(*omega, p.normal);
            if mu >= 0.0 {
                continue;
            }
            let g = field(p.position, *omega);
            vals.push(p.weight * ww * mu.abs() * g * g);
        }
    }
    pairwise_sum(&vals).sqrt()
}

/// Moment operator `(M psi)(x) = int_{S x I} psi(x, omega, E) domega dE`,
/// evaluated per spatial node.
pub fn moment(grid: &PhaseGrid, field: &PhaseField) -> Vec<f64> {
    grid.spatial
        .par_iter()
        .map(|sn| {
            let mut vals = Vec::with_capacity(grid.sphere.len() * grid.energies.len());
            for (w, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
                for &e in &grid.energies {
                    vals.push(ww * grid.energy_weight * field.eval(sn.position, *w, e));
                }
            }
            pairwise_sum(&vals)
        })
        .collect()
}

/// Moment of a field at one spatial point (quadrature over `S x I` only).
pub fn moment_at(grid: &PhaseGrid, field: &PhaseField, x: V3) -> f64 {
    let mut vals = Vec::with_capacity(grid.sphere.len() * grid.energies.len());
    for (w, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
        for &e in &grid.energies {
            vals.push(ww * grid.energy_weight * field.eval(x, *w, e));
        }
    }
    pairwise_sum(&vals)
}

/// Two routes to the same integral (volume form vs inflow boundary flow)
/// and their relative gap.
#[derive(Debug, Clone, Copy)]
pub struct FubiniReport {
    pub volume_value: f64,
    pub boundary_value: f64,
    pub relative_gap: f64,
}

/// Checks the Fubini identity
/// `int_{GxSxI} psi = int_{Gamma_-} int_0^{tau_-} psi(y + t w, w, E) |w.nu| dt dsigma dw dE`
/// with matched resolutions.
pub fn fubini_check(
    grid: &PhaseGrid,
    quad: &BoundaryQuadrature,
    field: &PhaseField,
) -> Result<FubiniReport> {
    // Volume route.
    let one = PhaseField::constant(1.0);
    let volume_value = inner_product(grid, field, &one)?;

    // Boundary-flow route: chord quadrature per inflow pair.
    let domain = &grid.domain;
    let pairs: Vec<(V3, V3, f64)> = quad
        .points
        .iter()
        .flat_map(|p| {
            quad.directions
                .nodes
                .iter()
                .zip(&quad.directions.weights)
                .filter_map(move |(omega, ww)| {
                    let mu = num::dot(*omega, p.normal);
                    (mu < 0.0).then_some((p.position, *omega, p.weight * ww * mu.abs()))
                })
        })
        .collect();
    let chords: Vec<f64> = pairs
        .par_iter()
        .map(|&(y, omega, w)| {
            let tau = domain.boundary_escape_time(y, omega).unwrap_or(0.0);
            if tau <= 0.0 {
                return 0.0;
            }
            let mut vals = Vec::with_capacity(grid.energies.len());
            for &e in &grid.energies {
                let (ray, _) = num::gauss_adaptive(0.0, tau, 2, 1e-10, 8, |t| {
                    field.eval(num::axpy(t, omega, y), omega, e)
                });
                vals.push(grid.energy_weight * ray);
            }
            w * pairwise_sum(&vals)
        })
        .collect();
    let boundary_value = pairwise_sum(&chords);
    let scale = volume_value.abs().max(boundary_value.abs()).max(1e-300);
    Ok(FubiniReport {
        volume_value,
        boundary_value,
        relative_gap: (volume_value - boundary_value).abs() / scale,
    })
}

/// Chart finite differences of a direction-dependent function: gradient
/// components `(df/dphi, df/dtheta)` and the Laplace-Beltrami value
/// `(1/sin t) d_t (sin t d_t f) + (1/sin^2 t) d_pp f`.
#[derive(Debug, Clone, Copy)]
pub struct SphereDerivatives {
    pub grad: [f64; 2],
    pub laplacian: f64,
    /// Set when a pole-adjacent stencil fell back to one-sided differences.
    pub one_sided: bool,
}

/// Evaluates sphere derivatives of `f(omega)` at `omega` by chart finite
/// differences with step `step` (radians).
pub fn sphere_derivatives_at(
    f: &dyn Fn(V3) -> f64,
    omega: V3,
    step: f64,
) -> SphereDerivatives {
    let (phi, theta) = SphereChart::unmap(omega);
    let h = step;
    let fp = |p: f64, t: f64| f(SphereChart::map(p, t));
    let sin_t = theta.sin();
    let one_sided = theta < 2.0 * h || theta > PI - 2.0 * h;
    let d_phi = (fp(phi + h, theta) - fp(phi - h, theta)) / (2.0 * h);
    let (d_theta, d2_theta) = if one_sided {
        // Second-order one-sided stencils pointing away from the pole.
        let s = if theta < 2.0 * h { 1.0 } else { -1.0 };
        let f0 = fp(phi, theta);
        let f1 = fp(phi, theta + s * h);
        let f2 = fp(phi, theta + 2.0 * s * h);
        let f3 = fp(phi, theta + 3.0 * s * h);
        (
            s * (-1.5 * f0 + 2.0 * f1 - 0.5 * f2) / h,
            (2.0 * f0 - 5.0 * f1 + 4.0 * f2 - f3) / (h * h),
        )
    } else {
        let fm = fp(phi, theta - h);
        let f0 = fp(phi, theta);
        let fpl = fp(phi, theta + h);
        ((fpl - fm) / (2.0 * h), (fpl - 2.0 * f0 + fm) / (h * h))
    };
    let d2_phi = (fp(phi + h, theta) - 2.0 * fp(phi, theta) + fp(phi - h, theta)) / (h * h);
    let laplacian = d2_theta + (theta.cos() / sin_t.max(1e-12)) * d_theta
        + d2_phi / (sin_t * sin_t).max(1e-12);
    SphereDerivatives {
        grad: [d_phi, d_theta],
        laplacian,
        one_sided,
    }
}

/// Anisotropic Sobolev norm estimate per the mixed-derivative inner product:
/// the root of the sum over all `|alpha| <= m1`, `|beta| <= m2`, `l <= m3`
/// of squared `L^2` norms of finite-difference derivatives.
///
/// The estimator is a consistent indicator, not a certified norm: the
/// equivalence constant of the discrete stencils is not tracked.
pub fn sobolev_norm_estimate(
    grid: &PhaseGrid,
    field: &PhaseField,
    orders: (usize, usize, usize),
) -> Result<f64> {
    let (m1, m2, m3) = orders;
    if m1 > 2 || m2 > 2 || m3 > 2 {
        return Err(Error::InvalidArgument(
            "sobolev orders are supported in 0..=2 per axis".into(),
        ));
    }
    let alphas = multi_indices_3(m1);
    let betas = multi_indices_2(m2);
    let h_x = 0.5 * grid.cell_size;
    let h_w = 0.5 * PI / grid.sphere.n_theta as f64;
    let h_e = if grid.energies.len() > 1 {
        0.5 * grid.energy_weight
    } else {
        0.25 * grid.interval.measure()
    };

    let n_w = grid.sphere.len();
    let per_x: Vec<f64> = grid
        .spatial
        .par_iter()
        .map(|sn| {
            let mut vals = Vec::new();
            for iw in 0..n_w {
                let omega = grid.sphere.nodes[iw];
                let ww = grid.sphere.weights[iw];
                for &e in &grid.energies {
                    let mut node_sum = 0.0;
                    for alpha in &alphas {
                        for beta in &betas {
                            for l in 0..=m3 {
                                let d = mixed_derivative(
                                    grid, field, sn.position, omega, e, *alpha, *beta, l, h_x,
                                    h_w, h_e,
                                );
                                node_sum += d * d;
                            }
                        }
                    }
                    vals.push(sn.weight * ww * grid.energy_weight * node_sum);
                }
            }
            pairwise_sum(&vals)
        })
        .collect();
    let total = pairwise_sum(&per_x);
    if !total.is_finite() {
        return Err(Error::Data("non-finite Sobolev estimate".into()));
    }
    Ok(total.sqrt())
}

fn multi_indices_3(max_order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..=max_order {
        for b in 0..=max_order {
            for c in 0..=max_order {
                if a + b + c <= max_order {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

fn multi_indices_2(max_order: usize) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    for a in 0..=max_order {
        for b in 0..=max_order {
            if a + b <= max_order {
                out.push([a, b]);
            }
        }
    }
    out
}

/// Applies the mixed finite-difference derivative
/// `d_x^alpha d_omega^beta d_E^l` to the field at a phase point. Spatial
/// stencils switch to one-sided second-order forms within one step of the
/// boundary rather than dropping the node.
#[allow(clippy::too_many_arguments)]
fn mixed_derivative(
    grid: &PhaseGrid,
    field: &PhaseField,
    x: V3,
    omega: V3,
    e: f64,
    alpha: [usize; 3],
    beta: [usize; 2],
    l: usize,
    h_x: f64,
    h_w: f64,
    h_e: f64,
) -> f64 {
    // Innermost evaluation: energy derivative of order l.
    let e_eval = |x: V3, w: V3| -> f64 {
        let f = |ee: f64| field.eval(x, w, ee);
        fd_1d_clamped(&f, e, l, h_e, grid.interval.min, grid.interval.max)
    };
    // Next: chart derivatives in omega.
    let w_eval = |x: V3| -> f64 {
        if beta == [0, 0] {
            return e_eval(x, omega);
        }
        let (phi, theta) = SphereChart::unmap(omega);
        let g = |p: f64, t: f64| e_eval(x, SphereChart::map(p, t));
        fd_2d_chart(&g, phi, theta, beta, h_w)
    };
    // Outermost: spatial derivatives, axis by axis.
    spatial_derivative(grid, &w_eval, x, alpha, h_x)
}

fn spatial_derivative(
    grid: &PhaseGrid,
    f: &dyn Fn(V3) -> f64,
    x: V3,
    alpha: [usize; 3],
    h: f64,
) -> f64 {
    // Peel one axis at a time (tensor stencils commute).
    let Some(axis) = (0..3).find(|&j| alpha[j] > 0) else {
        return f(x);
    };
    let mut lower = alpha;
    lower[axis] -= 1;
    let g = |p: V3| spatial_derivative(grid, f, p, lower, h);
    let step = |k: f64| {
        let mut p = x;
        p[axis] += k * h;
        p
    };
    let can = |k: f64| grid.domain.inside(step(k));
    if can(-1.0) && can(1.0) {
        (g(step(1.0)) - g(step(-1.0))) / (2.0 * h)
    } else if can(1.0) && can(2.0) {
        // One-sided second-order forward difference.
        (-1.5 * g(step(0.0)) + 2.0 * g(step(1.0)) - 0.5 * g(step(2.0))) / h
    } else if can(-1.0) && can(-2.0) {
        (1.5 * g(step(0.0)) - 2.0 * g(step(-1.0)) + 0.5 * g(step(-2.0))) / h
    } else if can(1.0) {
        (g(step(1.0)) - g(step(0.0))) / h
    } else if can(-1.0) {
        (g(step(0.0)) - g(step(-1.0))) / h
    } else {
        // Sliver cell thinner than the stencil; its weight is negligible.
        0.0
    }
}

/// 1-D finite difference of order `l` in the energy variable with clamping
/// at the interval ends (one-sided stencils there).
fn fd_1d_clamped(f: &dyn Fn(f64) -> f64, e: f64, l: usize, h: f64, lo: f64, hi: f64) -> f64 {
    match l {
        0 => f(e),
        1 => {
            if e - h >= lo && e + h <= hi {
                (f(e + h) - f(e - h)) / (2.0 * h)
            } else if e + 2.0 * h <= hi {
                (-1.5 * f(e) + 2.0 * f(e + h) - 0.5 * f(e + 2.0 * h)) / h
            } else {
                (1.5 * f(e) - 2.0 * f(e - h) + 0.5 * f(e - 2.0 * h)) / h
            }
        }
        2 => {
            if e - h >= lo && e + h <= hi {
                (f(e + h) - 2.0 * f(e) + f(e - h)) / (h * h)
            } else if e + 3.0 * h <= hi {
                (2.0 * f(e) - 5.0 * f(e + h) + 4.0 * f(e + 2.0 * h) - f(e + 3.0 * h)) / (h * h)
            } else {
                (2.0 * f(e) - 5.0 * f(e - h) + 4.0 * f(e - 2.0 * h) - f(e - 3.0 * h)) / (h * h)
            }
        }
        _ => {
            // Recurse: d^l = d(d^{l-1}).
            let inner = |ee: f64| fd_1d_clamped(f, ee, l - 1, h, lo, hi);
            (inner(e + h) - inner(e - h)) / (2.0 * h)
        }
    }
}

fn fd_2d_chart(g: &dyn Fn(f64, f64) -> f64, phi: f64, theta: f64, beta: [usize; 2], h: f64) -> f64 {
    // phi is periodic; theta stencils stay off the poles by clamping.
    if beta[0] > 0 {
        let mut lower = beta;
        lower[0] -= 1;
        let f = |p: f64| fd_2d_chart(g, p, theta, lower, h);
        return (f(phi + h) - f(phi - h)) / (2.0 * h);
    }
    if beta[1] > 0 {
        let mut lower = beta;
        lower[1] -= 1;
        let f = |t: f64| fd_2d_chart(g, phi, t, lower, h);
        if theta - h > 0.0 && theta + h < PI {
            return (f(theta + h) - f(theta - h)) / (2.0 * h);
        } else if theta + 2.0 * h < PI {
            return (-1.5 * f(theta) + 2.0 * f(theta + h) - 0.5 * f(theta + 2.0 * h)) / h;
        }
        return (1.5 * f(theta) - 2.0 * f(theta - h) + 0.5 * f(theta - 2.0 * h)) / h;
    }
    g(phi, theta)
}

/// Monte Carlo estimate with reported standard error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Fractional Sobolev seminorm in the spatial axis, order `s = m + kappa`:
/// the double-integral seminorm
/// `sum_{|a| = m} int |d^a psi(x) - d^a psi(x')|^2 / |x - x'|^{3 + 2 kappa}`
/// estimated by pair-sampling Monte Carlo stratified by `|x - x'|` decade.
///
/// `decades` is the resolution knob: value reported for the pair-distance
/// range `[2^-decades, 1] * diam`. Divergent seminorms grow without bound as
/// decades increase.
pub fn fractional_seminorm(
    grid: &PhaseGrid,
    field: &PhaseField,
    m: usize,
    kappa: f64,
    decades: usize,
    samples_per_decade: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !(0.0 < kappa && kappa < 1.0) {
        return Err(Error::InvalidArgument("kappa must lie in (0, 1)".into()));
    }
    if m > 1 {
        return Err(Error::InvalidArgument(
            "fractional seminorm supports m in {0, 1}".into(),
        ));
    }
    let domain = &grid.domain;
    let diam = domain.diameter();
    let h_x = 0.25 * grid.cell_size;
    let volume: f64 = pairwise_sum(&grid.spatial.iter().map(|n| n.weight).collect::<Vec<_>>());
    let interval = grid.interval;

    // Derivative components |alpha| = m (m = 0: the field itself).
    let components: Vec<[usize; 3]> = if m == 0 {
        vec![[0, 0, 0]]
    } else {
        vec![[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    };

    let per_decade: Vec<(f64, f64)> = (0..decades)
        .into_par_iter()
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 * (l as u64 + 1)));
            let r_hi = diam * 0.5f64.powi(l as i32);
            let r_lo = 0.5 * r_hi;
            let mut vals = Vec::with_capacity(samples_per_decade);
            for _ in 0..samples_per_decade {
                // Uniform x in G (rejection from bounding box), uniform pair
                // direction, log-uniform pair distance within the decade.
                let x = loop {
                    let c = [
                        rng.gen_range(grid.origin[0]..grid.origin[0] + grid.cell_size * grid.lattice[0] as f64),
                        rng.gen_range(grid.origin[1]..grid.origin[1] + grid.cell_size * grid.lattice[1] as f64),
                        rng.gen_range(grid.origin[2]..grid.origin[2] + grid.cell_size * grid.lattice[2] as f64),
                    ];
                    if domain.inside(c) {
                        break c;
                    }
                };
                let u = random_unit(&mut rng);
                let omega = random_unit(&mut rng);
                let e = rng.gen_range(interval.min..interval.max);
                let r = r_lo * (r_hi / r_lo).powf(rng.gen::<f64>());
                let xp = num::axpy(r, u, x);
                if !domain.inside(xp) {
                    vals.push(0.0);
                    continue;
                }
                let mut diff_sq = 0.0;
                for comp in &components {
                    let a = spatial_derivative(grid, &|p| field.eval(p, omega, e), x, *comp, h_x);
                    let b = spatial_derivative(grid, &|p| field.eval(p, omega, e), xp, *comp, h_x);
                    diff_sq += (a - b) * (a - b);
                }
                // Measure: dx' = r^2 dr du with du over the pair-direction
                // sphere (4 pi); log-uniform r has density 1/(r ln 2) on the
                // decade, and r^2 * r / r^{3+2k} = r^{-2k}.
                let jac = volume * (4.0 * PI) * (4.0 * PI) * interval.measure() * (2.0f64).ln();
                vals.push(jac * r.powf(-2.0 * kappa) * diff_sq);
            }
            num::mean_stderr(&vals)
        })
        .collect();

    let value = pairwise_sum(&per_decade.iter().map(|p| p.0).collect::<Vec<_>>());
    let var = pairwise_sum(&per_decade.iter().map(|p| p.1 * p.1).collect::<Vec<_>>());
    Ok(McEstimate {
        value,
        stderr: var.sqrt(),
        samples: decades * samples_per_decade,
    })
}

pub(crate) fn random_unit(rng: &mut ChaCha8Rng) -> V3 {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = num::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return num::scale(1.0 / n, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n_x: usize, n_phi: usize, n_theta: usize, n_e: usize) -> PhaseGrid {
        PhaseGrid::new(
            &ConvexDomain::unit_ball(),
            n_x,
            n_phi,
            n_theta,
            n_e,
            EnergyInterval::new(0.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn total_weight_converges_to_phase_volume() {
        let exact = (4.0 / 3.0) * PI * 4.0 * PI;
        let g = unit_grid(24, 8, 4, 2);
        assert!((g.total_weight() - exact).abs() / exact < 2e-3);
    }

    #[test]
    fn l2_norm_of_one() {
        let g = unit_grid(24, 8, 4, 2);
        let exact = (16.0 * PI * PI / 3.0f64).sqrt();
        let v = l2_norm(&g, &PhaseField::constant(1.0)).unwrap();
        assert!((v - exact).abs() / exact < 1e-3, "{v} vs {exact}");
    }

    #[test]
    fn l2_norm_of_zero() {
        let g = unit_grid(8, 4, 3, 2);
        assert_eq!(l2_norm(&g, &PhaseField::constant(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn l2_norm_of_energy_ramp() {
        let g = unit_grid(24, 8, 4, 16);
        let f = PhaseField::closure("E", |_, _, e| e);
        let exact = (16.0 * PI * PI / 3.0 / 3.0f64).sqrt();
        let v = l2_norm(&g, &f).unwrap();
        assert!((v - exact).abs() / exact < 2e-3, "{v} vs {exact}");
    }

    #[test]
    fn l2_norm_rejects_nan() {
        let g = unit_grid(8, 4, 3, 1);
        let f = PhaseField::closure("nan", |_, _, _| f64::NAN);
        assert!(matches!(l2_norm(&g, &f), Err(Error::Data(_))));
    }

    #[test]
    fn trace_norm_of_one_unit_weight() {
        let ball = ConvexDomain::unit_ball();
        let quad = BoundaryQuadrature::new(&ball, 32, 16).unwrap();
        let g = unit_grid(4, 4, 3, 4);
        let v = trace_norm(
            &ball,
            &quad,
            (&g.energies, g.energy_weight),
            &BoundaryField::constant(1.0),
            TraceWeight::Unit,
        )
        .unwrap();
        let exact = 2.0 * PI; // sqrt(4 pi^2) with m(I) = 1
        assert!((v - exact).abs() / exact < 1e-3, "{v}");
    }

    #[test]
    fn trace_norm_of_zero_every_weight() {
        let ball = ConvexDomain::unit_ball();
        let quad = BoundaryQuadrature::new(&ball, 8, 6).unwrap();
        let g = unit_grid(4, 4, 3, 2);
        for w in [TraceWeight::Unit, TraceWeight::TauMinus, TraceWeight::M2(0)] {
            let v = trace_norm(
                &ball,
                &quad,
                (&g.energies, g.energy_weight),
                &BoundaryField::zero(),
                w,
            )
            .unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn moment_of_constant_and_odd_fields() {
        let g = unit_grid(8, 12, 8, 2);
        let m1 = moment_at(&g, &PhaseField::constant(1.0), [0.0; 3]);
        assert!((m1 - 4.0 * PI).abs() / (4.0 * PI) < 1e-12);
        let modd = moment_at(&g, &PhaseField::closure("w3", |_, w, _| w[2]), [0.0; 3]);
        assert!(modd.abs() < 1e-12);
    }

    #[test]
    fn moment_of_escape_field_at_center() {
        let g = unit_grid(8, 12, 8, 2);
        let ball = ConvexDomain::unit_ball();
        let f = PhaseField::closure("1-exp(-t)", move |x, w, _| {
            1.0 - (-ball.escape_time(x, w).unwrap()).exp()
        });
        let m = moment_at(&g, &f, [0.0; 3]);
        let exact = 4.0 * PI * (1.0 - (-1.0f64).exp());
        assert!((m - exact).abs() / exact < 1e-10);
    }

    #[test]
    fn moment_linearity() {
        let g = unit_grid(6, 6, 4, 2);
        let f1 = PhaseField::closure("f1", |x, _, _| x[0] * x[0]);
        let f2 = PhaseField::closure("f2", |_, w, e| w[2] * e);
        let combo = PhaseField::closure("combo", |x, w, e| 2.0 * x[0] * x[0] - 3.0 * w[2] * e);
        let xs = [[0.1, 0.2, -0.3], [0.0; 3], [0.5, 0.0, 0.1]];
        for x in xs {
            let lhs = moment_at(&g, &combo, x);
            let rhs = 2.0 * moment_at(&g, &f1, x) - 3.0 * moment_at(&g, &f2, x);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn fubini_identity_for_constant_zero_and_quadratic() {
        let g = unit_grid(20, 12, 6, 2);
        let quad = BoundaryQuadrature::new(&ConvexDomain::unit_ball(), 24, 12).unwrap();
        let one = PhaseField::constant(1.0);
        let r = fubini_check(&g, &quad, &one).unwrap();
        let exact = 16.0 * PI * PI / 3.0;
        assert!((r.volume_value - exact).abs() / exact < 2e-3);
        assert!(r.relative_gap < 1e-3, "gap {}", r.relative_gap);

        let zero = PhaseField::constant(0.0);
        let rz = fubini_check(&g, &quad, &zero).unwrap();
        assert_eq!(rz.volume_value, 0.0);
        assert_eq!(rz.boundary_value, 0.0);

        let quad_field = PhaseField::closure("x1^2", |x, _, _| x[0] * x[0]);
        let rq = fubini_check(&g, &quad, &quad_field).unwrap();
        // Brute-force volume oracle: int_G x1^2 = 4 pi / 15, times 4 pi m(I).
        let oracle = 4.0 * PI / 15.0 * 4.0 * PI;
        assert!((rq.volume_value - oracle).abs() / oracle < 5e-3);
        assert!(rq.relative_gap < 1e-3, "gap {}", rq.relative_gap);
    }

    #[test]
    fn sphere_derivative_eigenfunctions() {
        // w3 = cos(theta) and w1 are l = 1 spherical harmonics:
        // Delta_S f = -2 f.
        let f3 = |w: V3| w[2];
        let f1 = |w: V3| w[0];
        let step = 1e-4;
        for (f, name) in [(&f3 as &dyn Fn(V3) -> f64, "w3"), (&f1, "w1")] {
            for omega in SphereChart::new(8, 6).nodes.iter() {
                let d = sphere_derivatives_at(f, *omega, step);
                let expect = -2.0 * f(*omega);
                assert!(
                    (d.laplacian - expect).abs() < 1e-5 + 1e-4 * expect.abs(),
                    "{name}: {} vs {expect}",
                    d.laplacian
                );
            }
        }
        // Constant field: all derivatives vanish.
        let d = sphere_derivatives_at(&|_| 1.0, [0.0, 0.0, 1.0], step);
        assert!(d.grad[0].abs() < 1e-10 && d.grad[1].abs() < 1e-10);
        assert!(d.laplacian.abs() < 1e-6);
    }

    #[test]
    fn sobolev_constant_equals_l2() {
        let g = unit_grid(10, 6, 4, 2);
        let one = PhaseField::constant(1.0);
        let l2 = l2_norm(&g, &one).unwrap();
        for orders in [(0, 0, 0), (1, 0, 0), (1, 1, 1), (2, 0, 1)] {
            let v = sobolev_norm_estimate(&g, &one, orders).unwrap();
            assert!((v - l2).abs() < 1e-9 * l2, "{orders:?}");
        }
    }

    #[test]
    fn sobolev_monotone_in_orders() {
        let g = unit_grid(8, 6, 4, 2);
        let f = PhaseField::closure("mix", |x, w, e| x[0] * x[0] + w[2] * e + 0.3 * x[1]);
        let n000 = sobolev_norm_estimate(&g, &f, (0, 0, 0)).unwrap();
        let n100 = sobolev_norm_estimate(&g, &f, (1, 0, 0)).unwrap();
        let n110 = sobolev_norm_estimate(&g, &f, (1, 1, 0)).unwrap();
        let n111 = sobolev_norm_estimate(&g, &f, (1, 1, 1)).unwrap();
        assert!(n000 <= n100 && n100 <= n110 && n110 <= n111);
    }

    #[test]
    fn fractional_seminorm_smooth_and_constant() {
        let g = unit_grid(10, 4, 3, 1);
        let smooth = PhaseField::closure("x1^2", |x, _, _| x[0] * x[0]);
        let a = fractional_seminorm(&g, &smooth, 0, 0.5, 8, 512, 9).unwrap();
        let b = fractional_seminorm(&g, &smooth, 0, 0.5, 16, 512, 9).unwrap();
        // Stable under doubling the decade depth (Lipschitz integrand).
        assert!(b.value < 1.3 * a.value + 1e-9, "{} vs {}", a.value, b.value);
        let c = fractional_seminorm(&g, &PhaseField::constant(3.0), 0, 0.5, 8, 256, 9).unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn interpolation_reproduces_multilinear_fields() {
        let grid = Arc::new(unit_grid(10, 8, 6, 4));
        let f = PhaseField::closure("lin", |x, _, e| 1.0 + 2.0 * x[0] - x[2] + 0.5 * e);
        let sampled = f.sample_onto(grid.clone()).unwrap();
        // Probe strictly interior points away from straddling cells.
        for (x, e) in [([0.1, 0.05, -0.2], 0.3), ([0.0; 3], 0.55), ([-0.3, 0.2, 0.1], 0.7)] {
            let w = grid.sphere.nodes[5];
            let exact = f.eval(x, w, e);
            let got = sampled.eval(x, w, e);
            assert!((got - exact).abs() < 5e-3, "{got} vs {exact}");
        }
    }
}
