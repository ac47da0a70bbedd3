//! Hierarchical equations of motion for the overdamped (Drude–Lorentz) bath.
//!
//! For bath modes `{(c_k, ν_k)}` and coupling operator `Q`, the auxiliary
//! density operators (ADOs) obey
//!
//! ```text
//! dρ_n/dt = −i[H(t), ρ_n] − Σ_k n_k ν_k ρ_n
//!           − i Σ_k [Q, ρ_{n+e_k}]
//!           − i Σ_k n_k (c_k Q ρ_{n−e_k} − c_k* ρ_{n−e_k} Q)
//!           − Δ_K [Q, [Q, ρ_n]]
//! ```
//!
//! with `Δ_K` the folded Matsubara tail. Scaled ADOs
//! `ρ̃_n = ρ_n / Π_k √(n_k! |c_k|^{n_k})` replace the coupling weights by
//! `√((n_k+1)|c_k|)` (up) and `√(n_k/|c_k|)` (down).
//!
//! Internally everything is in rad/fs and fs.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::bath::{expansion_coeffs, terminator_strength, BathParams};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, DiagOp};
use crate::model::{Basis, DensityMatrix, DriveField, OperatorSet};
use crate::units::RAD_PER_FS_PER_CM;

const ZERO: C64 = C64::new(0.0, 0.0);

pub const DEFAULT_ADO_CAP: usize = 100_000;

/// ADO norm above which propagation is declared unstable.
pub const INSTABILITY_NORM: f64 = 1.0e6;

/// Occupation numbers of one ADO.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HierarchyIndex {
    pub counts: Vec<u32>,
}

impl HierarchyIndex {
    pub fn zero(n_modes: usize) -> Self {
        Self { counts: vec![0; n_modes] }
    }

    pub fn tier(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }
}

/// All indices with tier ≤ depth, with raise/lower neighbour tables.
///
/// Indices are ordered by tier, then lexicographically with the first mode
/// most significant and descending; index 0 is always the physical matrix.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    n_modes: usize,
    depth: usize,
    indices: Vec<HierarchyIndex>,
    lookup: HashMap<HierarchyIndex, usize>,
    raise: Vec<Vec<Option<usize>>>,
    lower: Vec<Vec<Option<usize>>>,
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

pub fn enumerate_hierarchy(n_modes: usize, depth: usize) -> Result<Hierarchy> {
    enumerate_hierarchy_capped(n_modes, depth, DEFAULT_ADO_CAP)
}

pub fn enumerate_hierarchy_capped(n_modes: usize, depth: usize, cap: usize) -> Result<Hierarchy> {
    if n_modes == 0 {
        return Err(invalid("n_modes", "need at least one bath mode"));
    }
    let count = binomial((n_modes + depth) as u128, depth as u128).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(Error::HierarchyTooLarge { n_modes, depth, count, cap });
    }

    let mut indices = Vec::with_capacity(count as usize);
    for tier in 0..=depth {
        let mut counts = vec![0u32; n_modes];
        push_compositions(&mut counts, 0, tier as u32, &mut indices);
    }
    let lookup: HashMap<_, _> = indices.iter().cloned().enumerate().map(|(i, idx)| (idx, i)).collect();

    let mut raise = Vec::with_capacity(indices.len());
    let mut lower = Vec::with_capacity(indices.len());
    for idx in &indices {
        let mut up = Vec::with_capacity(n_modes);
        let mut down = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            let mut nb = idx.clone();
            nb.counts[k] += 1;
            up.push(lookup.get(&nb).copied());
            if idx.counts[k] > 0 {
                let mut nb = idx.clone();
                nb.counts[k] -= 1;
                down.push(lookup.get(&nb).copied());
            } else {
                down.push(None);
            }
        }
        raise.push(up);
        lower.push(down);
    }
    Ok(Hierarchy { n_modes, depth, indices, lookup, raise, lower })
}

/// Every way of distributing `remaining` quanta over `counts[pos..]`,
/// earlier modes taking the most first.
fn push_compositions(counts: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<HierarchyIndex>) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        out.push(HierarchyIndex { counts: counts.clone() });
        counts[pos] = 0;
        return;
    }
    for c in (0..=remaining).rev() {
        counts[pos] = c;
        push_compositions(counts, pos + 1, remaining - c, out);
    }
    counts[pos] = 0;
}

impl Hierarchy {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn indices(&self) -> &[HierarchyIndex] {
        &self.indices
    }

    pub fn position(&self, index: &HierarchyIndex) -> Option<usize> {
        self.lookup.get(index).copied()
    }

    /// ADO reached by adding one quantum to `mode`, if within depth.
    pub fn raise(&self, i: usize, mode: usize) -> Option<usize> {
        self.raise[i][mode]
    }

    /// ADO reached by removing one quantum from `mode`, if occupied.
    pub fn lower(&self, i: usize, mode: usize) -> Option<usize> {
        self.lower[i][mode]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// Classical fourth-order Runge–Kutta on the full generator.
    Rk4,
    /// Fourth-order Runge–Kutta in the interaction picture of the diagonal
    /// part (bare level energies and ADO damping), which is integrated
    /// exactly.
    LawsonRk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatorConfig {
    /// Time step, fs.
    pub dt: f64,
    /// Hierarchy depth L.
    pub depth: usize,
    /// Steps between recorded samples.
    pub record_stride: usize,
    pub use_scaled_ados: bool,
    pub integrator: Integrator,
    pub ado_cap: usize,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            depth: 4,
            record_stride: 20,
            use_scaled_ados: true,
            integrator: Integrator::LawsonRk4,
            ado_cap: DEFAULT_ADO_CAP,
        }
    }
}

impl PropagatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(invalid("dt", format!("must be finite and > 0, got {}", self.dt)));
        }
        if self.depth < 1 {
            return Err(invalid("depth", "must be >= 1"));
        }
        if self.record_stride < 1 {
            return Err(invalid("record_stride", "must be >= 1"));
        }
        Ok(())
    }
}

/// Physical density matrix plus all ADOs, stored contiguously in index order.
#[derive(Clone, Debug)]
pub struct AdoHierarchy {
    hierarchy: Arc<Hierarchy>,
    dim: usize,
    data: Vec<C64>,
    /// Factor converting each stored ADO to its unscaled value.
    unscale: Arc<Vec<f64>>,
    scaled: bool,
    /// Current time, fs.
    pub time: f64,
}

impl AdoHierarchy {
    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.hierarchy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hierarchy.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.hierarchy.depth()
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    /// Stored ADO `i` (scaled if the hierarchy uses scaling).
    pub fn ado(&self, i: usize) -> ArrayView2<'_, C64> {
        let dd = self.dim * self.dim;
        ArrayView2::from_shape((self.dim, self.dim), &self.data[i * dd..(i + 1) * dd]).expect("square block")
    }

    pub fn ado_at(&self, index: &HierarchyIndex) -> Option<ArrayView2<'_, C64>> {
        self.hierarchy.position(index).map(|i| self.ado(i))
    }

    /// ADO `i` in the unscaled convention.
    pub fn ado_unscaled(&self, i: usize) -> Array2<C64> {
        self.ado(i).mapv(|z| z * self.unscale[i])
    }

    /// Overwrite ADO `i` from its unscaled value.
    pub fn set_ado_unscaled(&mut self, i: usize, m: &Array2<C64>) -> Result<()> {
        if m.dim() != (self.dim, self.dim) {
            return Err(Error::DimensionMismatch { expected: self.dim, found: m.nrows() });
        }
        let dd = self.dim * self.dim;
        let s = 1.0 / self.unscale[i];
        for (dst, src) in self.data[i * dd..(i + 1) * dd].iter_mut().zip(m.iter()) {
            *dst = src * s;
        }
        Ok(())
    }

    pub fn physical(&self) -> DensityMatrix {
        DensityMatrix::new(self.ado(0).to_owned(), Basis::Diabatic)
    }

    /// Replace every ADO by `c ρ_n c†` for a real operator `c`.
    pub fn sandwich(&self, c: &Array2<f64>) -> AdoHierarchy {
        let mut out = self.clone();
        let dd = self.dim * self.dim;
        for i in 0..self.len() {
            let m = linalg::sandwich(c, &self.ado(i).to_owned());
            out.data[i * dd..(i + 1) * dd].copy_from_slice(m.as_slice().expect("standard layout"));
        }
        out
    }

    /// Largest element magnitude over all ADOs; NaN if any element is not finite.
    pub fn max_norm(&self) -> f64 {
        let mut worst = 0.0_f64;
        let mut finite = true;
        for z in &self.data {
            let a = z.norm_sqr();
            finite &= a.is_finite();
            worst = worst.max(a);
        }
        if finite {
            worst.sqrt()
        } else {
            f64::NAN
        }
    }

    const MAGIC: &'static [u8; 8] = b"ADOH0001";

    /// Binary checkpoint: magic `ADOH0001`, then `u32` n_modes, depth, dim,
    /// flags (bit 0 = scaled), `f64` time, then the ADOs as little-endian
    /// `(re, im)` doubles in index order, each matrix row-major.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u32::<LittleEndian>(self.hierarchy.n_modes() as u32)?;
        w.write_u32::<LittleEndian>(self.hierarchy.depth() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(u32::from(self.scaled))?;
        w.write_f64::<LittleEndian>(self.time)?;
        for z in &self.data {
            w.write_f64::<LittleEndian>(z.re)?;
            w.write_f64::<LittleEndian>(z.im)?;
        }
        Ok(())
    }

    /// Restore ADO values and time from a checkpoint written by a hierarchy of
    /// the same shape.
    pub fn read_checkpoint<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n_modes = r.read_u32::<LittleEndian>()? as usize;
        let depth = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let flags = r.read_u32::<LittleEndian>()?;
        let expected = (self.hierarchy.n_modes(), self.hierarchy.depth(), self.dim, u32::from(self.scaled));
        if (n_modes, depth, dim, flags) != expected {
            return Err(Error::Checkpoint(format!(
                "shape (modes {n_modes}, depth {depth}, dim {dim}, flags {flags}) does not match {expected:?}"
            )));
        }
        let time = r.read_f64::<LittleEndian>()?;
        let mut data = Vec::with_capacity(self.data.len());
        for _ in 0..self.data.len() {
            let re = r.read_f64::<LittleEndian>()?;
            let im = r.read_f64::<LittleEndian>()?;
            data.push(C64::new(re, im));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        self.data = data;
        self.time = time;
        Ok(())
    }
}

/// Neighbour ADO and its weight in `iL`: `w` for raising links, `w c_k` for
/// lowering links.
struct Link {
    target: usize,
    coeff: C64,
}

/// Precomputed generator of the hierarchy for one operator set and bath.
pub struct Generator {
    dim: usize,
    hierarchy: Arc<Hierarchy>,
    unscale: Arc<Vec<f64>>,
    scaled: bool,
    /// `D_r − D_c` of the diagonal of H_S, row-major.
    diag_phase: Vec<f64>,
    /// Off-diagonal part of H_S.
    h_off: DiagOp,
    flip: DiagOp,
    q: DiagOp,
    terminator: f64,
    damping: Vec<f64>,
    links: Vec<Vec<Link>>,
    drive: DriveField,
}

impl Generator {
    /// Builds the generator. With an uncoupled bath (η = 0) the hierarchy is
    /// reduced to the physical matrix alone, since every ADO stays zero.
    pub fn new(ops: &OperatorSet, bath: &BathParams, drive: DriveField, config: &PropagatorConfig) -> Result<Self> {
        config.validate()?;
        let modes = expansion_coeffs(bath)?;
        let dim = ops.dim();
        let coupled = bath.eta > 0.0;
        let depth = if coupled { config.depth } else { 0 };
        let hierarchy = Arc::new(enumerate_hierarchy_capped(modes.len(), depth, config.ado_cap)?);

        let coeffs: Vec<C64> = modes.iter().map(|m| m.coeff_fs()).collect();
        let rates: Vec<f64> = modes.iter().map(|m| m.rate_fs()).collect();
        let terminator = terminator_strength(bath)? * RAD_PER_FS_PER_CM;

        let n_ados = hierarchy.len();
        let mut unscale = Vec::with_capacity(n_ados);
        let mut damping = Vec::with_capacity(n_ados);
        let mut links = Vec::with_capacity(n_ados);
        for (i, idx) in hierarchy.indices().iter().enumerate() {
            let mut factor = 1.0;
            let mut gamma = 0.0;
            let mut ups = Vec::new();
            for (k, &n) in idx.counts.iter().enumerate() {
                let n = n as f64;
                let c = coeffs[k];
                let mag = c.norm();
                gamma += n * rates[k];
                if config.use_scaled_ados && n > 0.0 {
                    for j in 1..=(n as u32) {
                        factor *= (j as f64 * mag).sqrt();
                    }
                }
                if mag == 0.0 {
                    continue;
                }
                if let Some(target) = hierarchy.raise(i, k) {
                    let w = if config.use_scaled_ados { ((n + 1.0) * mag).sqrt() } else { 1.0 };
                    ups.push(Link { target, coeff: C64::new(w, 0.0) });
                }
                if let Some(target) = hierarchy.lower(i, k) {
                    let w = if config.use_scaled_ados { (n / mag).sqrt() } else { n };
                    ups.push(Link { target, coeff: c * w });
                }
            }
            unscale.push(factor);
            damping.push(gamma);
            links.push(ups);
        }

        let to_rad = |m: &Array2<f64>| m.mapv(|x| x * RAD_PER_FS_PER_CM);
        let h = to_rad(&ops.h_s);
        let mut h_off = h.clone();
        for r in 0..dim {
            h_off[[r, r]] = 0.0;
        }
        let mut diag_phase = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                diag_phase[r * dim + c] = h[[r, r]] - h[[c, c]];
            }
        }

        Ok(Self {
            dim,
            hierarchy,
            unscale: Arc::new(unscale),
            scaled: config.use_scaled_ados,
            diag_phase,
            h_off: DiagOp::from_dense(&h_off),
            flip: DiagOp::from_dense(&ops.flip),
            q: DiagOp::from_dense(&ops.q_op),
            terminator,
            damping,
            links,
            drive,
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn drive(&self) -> DriveField {
        self.drive
    }

    pub fn set_drive(&mut self, drive: DriveField) {
        self.drive = drive;
    }

    /// Folded Matsubara tail Δ_K, rad/fs.
    pub fn terminator(&self) -> f64 {
        self.terminator
    }

    /// Hierarchy state with `rho` at index 0 and all ADOs zero.
    pub fn initial_state(&self, rho: &DensityMatrix, time_fs: f64) -> Result<AdoHierarchy> {
        if rho.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: rho.dim() });
        }
        let dd = self.dim * self.dim;
        let mut data = vec![ZERO; dd * self.hierarchy.len()];
        for (dst, src) in data[..dd].iter_mut().zip(rho.elements.iter()) {
            *dst = *src;
        }
        Ok(AdoHierarchy {
            hierarchy: self.hierarchy.clone(),
            dim: self.dim,
            data,
            unscale: self.unscale.clone(),
            scaled: self.scaled,
            time: time_fs,
        })
    }

    fn check_shape(&self, state: &AdoHierarchy) -> Result<()> {
        if !Arc::ptr_eq(&state.hierarchy, &self.hierarchy)
            && (state.hierarchy.n_modes() != self.hierarchy.n_modes() || state.hierarchy.depth() != self.hierarchy.depth())
        {
            return Err(invalid("state", "hierarchy shape does not match the generator"));
        }
        if state.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: state.dim });
        }
        if state.scaled != self.scaled {
            return Err(invalid("state", "ADO scaling convention does not match the generator"));
        }
        Ok(())
    }

    /// Full time derivative of the hierarchy at time `t` (fs).
    ///
    /// Every ADO must be Hermitian, which holds for any hierarchy started
    /// from a Hermitian physical matrix with zero ADOs (the equation maps
    /// Hermitian hierarchies to Hermitian derivatives).
    pub fn rhs(&self, state: &AdoHierarchy, time_fs: f64) -> Result<AdoHierarchy> {
        self.check_shape(state)?;
        let mut out = state.clone();
        let mut scratch = Scratch::new(self.dim);
        self.apply(&state.data, time_fs, &mut out.data, &mut scratch, true);
        Ok(out)
    }

    /// `out = N(t, x)` or the full derivative when `with_diagonal` is set,
    /// where the diagonal part is `−i(D_r − D_c) − Σ n_k ν_k`.
    fn apply(&self, x: &[C64], time_fs: f64, out: &mut [C64], s: &mut Scratch, with_diagonal: bool) {
        // Every ADO is Hermitian, so ρH = (Hρ)† and the bath part
        // QL − RQ equals QL + (QL)†. With K = H'ρ + Q(iL) the derivative is
        // Y + Y† for Y = −iK + D(ρ)/2, where D is the diagonal part.
        let d = self.dim;
        let dd = d * d;
        let f = self.drive.coefficient(time_fs);
        for n in 0..self.hierarchy.len() {
            let rho = &x[n * dd..(n + 1) * dd];
            let dst = &mut out[n * dd..(n + 1) * dd];

            s.k.fill(ZERO);
            self.h_off.left_mul_add(rho, 1.0, &mut s.k);
            if f != 0.0 {
                self.flip.left_mul_add(rho, f, &mut s.k);
            }

            let links = &self.links[n];
            if !links.is_empty() || self.terminator != 0.0 {
                // iL = Σ_up w ρ_up + Σ_down w c_k ρ_down − iΔ [Q, ρ]
                if self.terminator != 0.0 {
                    s.l.fill(ZERO);
                    self.q.left_mul_add(rho, 1.0, &mut s.l);
                    let delta = self.terminator;
                    for r in 0..d {
                        for c in r..d {
                            let p = s.l[r * d + c] - s.l[c * d + r].conj();
                            let v = C64::new(delta * p.im, -delta * p.re);
                            s.l[r * d + c] = v;
                            s.l[c * d + r] = v.conj();
                        }
                    }
                } else {
                    s.l.fill(ZERO);
                }
                for link in links {
                    let src = &x[link.target * dd..(link.target + 1) * dd];
                    if link.coeff.im == 0.0 {
                        axpy_real(link.coeff.re, src, &mut s.l);
                    } else {
                        axpy_complex(link.coeff, src, &mut s.l);
                    }
                }
                self.q.left_mul_add(&s.l, 1.0, &mut s.k);
            }

            let g = 0.5 * self.damping[n];
            for y in s.k.iter_mut() {
                *y = C64::new(y.im, -y.re);
            }
            if with_diagonal {
                for ((y, r), ph) in s.k.iter_mut().zip(rho).zip(&self.diag_phase) {
                    *y += r * C64::new(-g, -0.5 * ph);
                }
            }
            for r in 0..d {
                for c in 0..d {
                    dst[r * d + c] = s.k[r * d + c] + s.k[c * d + r].conj();
                }
            }
        }
    }
}

/// `y += a x` for real `a`.
#[inline]
fn axpy_real(a: f64, x: &[C64], y: &mut [C64]) {
    let xf: &[f64] = bytemuck::cast_slice(x);
    let yf: &mut [f64] = bytemuck::cast_slice_mut(y);
    for (b, a_x) in yf.iter_mut().zip(xf) {
        *b += a * a_x;
    }
}

/// `y += a x`, written on the interleaved real representation.
#[inline]
fn axpy_complex(a: C64, x: &[C64], y: &mut [C64]) {
    let xf: &[f64] = bytemuck::cast_slice(x);
    let yf: &mut [f64] = bytemuck::cast_slice_mut(y);
    for (yc, xc) in yf.chunks_exact_mut(2).zip(xf.chunks_exact(2)) {
        yc[0] += a.re * xc[0] - a.im * xc[1];
        yc[1] += a.re * xc[1] + a.im * xc[0];
    }
}

struct Scratch {
    k: Vec<C64>,
    l: Vec<C64>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        let dd = dim * dim;
        Self { k: vec![ZERO; dd], l: vec![ZERO; dd] }
    }
}

/// Time derivative of every ADO, built from scratch from the model pieces.
pub fn heom_rhs(
    state: &AdoHierarchy,
    time_fs: f64,
    ops: &OperatorSet,
    bath: &BathParams,
    drive: DriveField,
    config: &PropagatorConfig,
) -> Result<AdoHierarchy> {
    Generator::new(ops, bath, drive, config)?.rhs(state, time_fs)
}

/// Sampled physical density matrices.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times_fs: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

/// Fixed-step propagator owning its generator and work buffers.
pub struct Propagator {
    generator: Generator,
    config: PropagatorConfig,
    k: [Vec<C64>; 4],
    stage: Vec<C64>,
    scratch: Scratch,
    /// `e^{−i(D_r−D_c)h}` for h = dt and dt/2.
    phase_full: Vec<C64>,
    phase_half: Vec<C64>,
    decay_full: Vec<f64>,
    decay_half: Vec<f64>,
}

impl Propagator {
    pub fn new(ops: &OperatorSet, bath: &BathParams, drive: DriveField, config: &PropagatorConfig) -> Result<Self> {
        let generator = Generator::new(ops, bath, drive, config)?;
        let size = generator.dim * generator.dim * generator.hierarchy.len();
        let h = config.dt;
        let phase = |h: f64| generator.diag_phase.iter().map(|p| C64::from_polar(1.0, -p * h)).collect::<Vec<_>>();
        let decay = |h: f64| generator.damping.iter().map(|g| (-g * h).exp()).collect::<Vec<_>>();
        Ok(Self {
            phase_full: phase(h),
            phase_half: phase(0.5 * h),
            decay_full: decay(h),
            decay_half: decay(0.5 * h),
            scratch: Scratch::new(generator.dim),
            k: [vec![ZERO; size], vec![ZERO; size], vec![ZERO; size], vec![ZERO; size]],
            stage: vec![ZERO; size],
            generator,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &PropagatorConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn set_drive(&mut self, drive: DriveField) {
        self.generator.set_drive(drive);
    }

    pub fn initial_state(&self, rho: &DensityMatrix, time_fs: f64) -> Result<AdoHierarchy> {
        self.generator.initial_state(rho, time_fs)
    }

    /// Advance `state` by one step of `config.dt` from time `t`.
    fn step(&mut self, x: &mut [C64], t: f64) {
        let h = self.config.dt;
        match self.config.integrator {
            Integrator::Rk4 => self.step_rk4(x, t, h),
            Integrator::LawsonRk4 => self.step_lawson(x, t, h),
        }
    }

    fn step_rk4(&mut self, x: &mut [C64], t: f64, h: f64) {
        let g = &self.generator;
        let [k1, k2, k3, k4] = &mut self.k;
        let stage = &mut self.stage;
        g.apply(x, t, k1, &mut self.scratch, true);
        for ((s, a), b) in stage.iter_mut().zip(x.iter()).zip(k1.iter()) {
            *s = a + b * (0.5 * h);
        }
        g.apply(stage, t + 0.5 * h, k2, &mut self.scratch, true);
        for ((s, a), b) in stage.iter_mut().zip(x.iter()).zip(k2.iter()) {
            *s = a + b * (0.5 * h);
        }
        g.apply(stage, t + 0.5 * h, k3, &mut self.scratch, true);
        for ((s, a), b) in stage.iter_mut().zip(x.iter()).zip(k3.iter()) {
            *s = a + b * h;
        }
        g.apply(stage, t + h, k4, &mut self.scratch, true);
        let w = h / 6.0;
        for i in 0..x.len() {
            x[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * w;
        }
    }

    fn step_lawson(&mut self, x: &mut [C64], t: f64, h: f64) {
        let g = &self.generator;
        let dd = g.dim * g.dim;
        let [k1, k2, k3, k4] = &mut self.k;
        let stage = &mut self.stage;
        let (pf, ph) = (&self.phase_full, &self.phase_half);
        let (df, dh) = (&self.decay_full, &self.decay_half);

        g.apply(x, t, k1, &mut self.scratch, false);
        // stage 2: E½ (x + h/2 k1)
        for n in 0..g.hierarchy.len() {
            let r = n * dd..(n + 1) * dd;
            for (((s, a), b), p) in stage[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&k1[r]).zip(ph) {
                *s = (a + b * (0.5 * h)) * p * dh[n];
            }
        }
        g.apply(stage, t + 0.5 * h, k2, &mut self.scratch, false);
        // stage 3: E½ x + h/2 k2
        for n in 0..g.hierarchy.len() {
            let r = n * dd..(n + 1) * dd;
            for (((s, a), b), p) in stage[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&k2[r]).zip(ph) {
                *s = a * p * dh[n] + b * (0.5 * h);
            }
        }
        g.apply(stage, t + 0.5 * h, k3, &mut self.scratch, false);
        // stage 4: E x + h E½ k3
        for n in 0..g.hierarchy.len() {
            let r = n * dd..(n + 1) * dd;
            for ((((s, a), b), p), q) in stage[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&k3[r]).zip(pf).zip(ph) {
                *s = a * p * df[n] + b * q * (h * dh[n]);
            }
        }
        g.apply(stage, t + h, k4, &mut self.scratch, false);
        // x ← E x + h/6 (E k1 + 2 E½ (k2 + k3) + k4)
        let w = h / 6.0;
        for n in 0..g.hierarchy.len() {
            let r = n * dd..(n + 1) * dd;
            for i in r {
                let j = i - n * dd;
                let full = pf[j] * df[n];
                let half = ph[j] * dh[n];
                x[i] = x[i] * full + (k1[i] * full + (k2[i] + k3[i]) * half * 2.0 + k4[i]) * w;
            }
        }
    }

    fn step_count(&self, state: &AdoHierarchy, t_end: f64) -> Result<usize> {
        let span = t_end - state.time;
        if !(span >= 0.0) {
            return Err(invalid("t_end", format!("{t_end} fs is before the state time {} fs", state.time)));
        }
        let steps = (span / self.config.dt).round();
        if (steps * self.config.dt - span).abs() > 1e-6 * self.config.dt.max(1.0) {
            return Err(invalid("t_end", format!("span {span} fs is not a multiple of dt = {} fs", self.config.dt)));
        }
        Ok(steps as usize)
    }

    /// Propagate to `t_end`, calling `observe(time, state)` at the start and
    /// after every `record_stride` steps.
    ///
    /// Step times are computed as `t₀ + i·dt` so sample grids are exact and
    /// reproducible.
    pub fn propagate_with<F>(&mut self, state: &mut AdoHierarchy, t_end: f64, mut observe: F) -> Result<()>
    where
        F: FnMut(f64, &AdoHierarchy),
    {
        self.generator.check_shape(state)?;
        let steps = self.step_count(state, t_end)?;
        let t0 = state.time;
        let stride = self.config.record_stride;
        observe(t0, state);
        for i in 0..steps {
            let t = t0 + i as f64 * self.config.dt;
            self.step(&mut state.data, t);
            state.time = t0 + (i + 1) as f64 * self.config.dt;
            let worst = state.max_norm();
            if worst.is_nan() {
                return Err(Error::Instability { time_fs: state.time, reason: "non-finite ADO element".into() });
            }
            if worst > INSTABILITY_NORM {
                return Err(Error::Instability {
                    time_fs: state.time,
                    reason: format!("ADO element magnitude {worst:e} exceeds {INSTABILITY_NORM:e}"),
                });
            }
            if (i + 1) % stride == 0 {
                observe(state.time, state);
            }
        }
        if steps > 0 {
            state.time = t_end;
        }
        Ok(())
    }

    /// Propagate to `t_end` and return the sampled physical density matrices.
    pub fn propagate(&mut self, state: &mut AdoHierarchy, t_end: f64) -> Result<Trajectory> {
        let mut traj = Trajectory::default();
        self.propagate_with(state, t_end, |t, s| {
            traj.times_fs.push(t);
            traj.states.push(s.physical());
        })?;
        Ok(traj)
    }

    /// Evolve `rho` with the drive off for `duration_fs`, ending at t = 0, so
    /// the ADOs carry the system–bath correlations of the undriven state.
    pub fn equilibrate(&mut self, rho: &DensityMatrix, duration_fs: f64) -> Result<AdoHierarchy> {
        let mut state = self.initial_state(rho, -duration_fs)?;
        let drive = self.generator.drive();
        self.generator.set_drive(DriveField::Off);
        let result = self.propagate_with(&mut state, 0.0, |_, _| {});
        self.generator.set_drive(drive);
        result?;
        state.time = 0.0;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{commutator, to_complex};
    use crate::model::{adiabatize, build_system, thermal_state, VibronicParams};
    use crate::units::cm_to_rad_per_fs;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const I: C64 = C64::new(0.0, 1.0);

    fn small_model(delta: f64, n_levels: usize) -> (VibronicParams, OperatorSet) {
        let p = VibronicParams { delta, n_levels, ..VibronicParams::default() };
        let ops = build_system(&p).unwrap();
        (p, ops)
    }

    #[test]
    fn hierarchy_sizes() {
        assert_eq!(enumerate_hierarchy(3, 4).unwrap().len(), 35);
        assert_eq!(enumerate_hierarchy(3, 0).unwrap().len(), 1);
        assert_eq!(enumerate_hierarchy(5, 4).unwrap().len(), 126);
        assert_eq!(enumerate_hierarchy(3, 6).unwrap().len(), 84);
        assert!(matches!(enumerate_hierarchy(20, 12), Err(Error::HierarchyTooLarge { .. })));
        assert!(enumerate_hierarchy(0, 2).is_err());
    }

    proptest! {
        #[test]
        fn hierarchy_links_are_consistent(n_modes in 1usize..5, depth in 0usize..6) {
            let h = enumerate_hierarchy(n_modes, depth).unwrap();
            let expected = binomial((n_modes + depth) as u128, depth as u128).unwrap() as usize;
            prop_assert_eq!(h.len(), expected);
            prop_assert_eq!(&h.indices()[0], &HierarchyIndex::zero(n_modes));
            let mut seen = std::collections::HashSet::new();
            for (i, idx) in h.indices().iter().enumerate() {
                prop_assert!(seen.insert(idx.clone()));
                prop_assert!(idx.tier() <= depth);
                let raises = (0..n_modes).filter(|&k| h.raise(i, k).is_some()).count();
                prop_assert_eq!(raises, if idx.tier() < depth { n_modes } else { 0 });
                for k in 0..n_modes {
                    if let Some(j) = h.raise(i, k) {
                        prop_assert_eq!(h.lower(j, k), Some(i));
                    }
                    prop_assert_eq!(h.lower(i, k).is_some(), idx.counts[k] > 0);
                }
            }
            for w in h.indices().windows(2) {
                prop_assert!(w[0].tier() <= w[1].tier());
            }
        }
    }

    fn closed_bath() -> BathParams {
        BathParams { eta: 0.0, ..BathParams::default() }
    }

    fn random_hermitian(dim: usize, seed: u64) -> Array2<C64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let m = Array2::from_shape_fn((dim, dim), |_| C64::new(next(), next()));
        (&m + &linalg::dagger(&m)).mapv(|z| z * 0.5)
    }

    #[test]
    fn closed_system_rhs_is_von_neumann() {
        let (_, ops) = small_model(1.2, 4);
        let cfg = PropagatorConfig::default();
        let g = Generator::new(&ops, &closed_bath(), DriveField::Off, &cfg).unwrap();
        assert_eq!(g.hierarchy().len(), 1);
        let rho = random_hermitian(8, 7);
        let state = g.initial_state(&DensityMatrix::new(rho.clone(), Basis::Diabatic), 0.0).unwrap();
        let d = g.rhs(&state, 0.0).unwrap();
        let h = to_complex(&ops.h_s).mapv(|z| z * RAD_PER_FS_PER_CM);
        let want = commutator(&h, &rho).mapv(|z| -I * z);
        let got = d.ado(0).to_owned();
        assert!(linalg::max_abs(&(&got - &want)) < 1e-14 * linalg::max_abs(&want).max(1.0));
    }

    #[test]
    fn closed_system_ados_stay_zero_with_full_hierarchy() {
        // even at nonzero depth, zero coupling leaves the ADOs untouched
        let (_, ops) = small_model(1.2, 3);
        let bath = BathParams { eta: 0.0, n_matsubara: 1, ..BathParams::default() };
        let g = Generator::new(&ops, &bath, DriveField::Off, &PropagatorConfig::default()).unwrap();
        assert_eq!(g.terminator(), 0.0);
        assert!(g.links.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn stationary_state_has_zero_derivative() {
        let (p, ops) = small_model(0.0, 5);
        let tr = adiabatize(&ops.h_s).unwrap();
        let rho = thermal_state(&p, &tr).unwrap();
        let g = Generator::new(&ops, &closed_bath(), DriveField::Off, &PropagatorConfig::default()).unwrap();
        let d = g.rhs(&g.initial_state(&rho, 0.0).unwrap(), 0.0).unwrap();
        assert!(d.max_norm() == 0.0);
    }

    #[test]
    fn physical_derivative_is_traceless_and_hermitian() {
        let (p, ops) = small_model(1.2, 4);
        let bath = BathParams::default();
        let cfg = PropagatorConfig { depth: 3, ..PropagatorConfig::default() };
        let g = Generator::new(&ops, &bath, DriveField::from_params(&p), &cfg).unwrap();
        let mut state = g.initial_state(&DensityMatrix::new(random_hermitian(8, 3), Basis::Diabatic), 0.0).unwrap();
        // fill every ADO with Hermitian data
        let dd = 64;
        for i in 1..state.len() {
            let m = random_hermitian(8, 100 + i as u64);
            state.as_mut_slice()[i * dd..(i + 1) * dd].copy_from_slice(m.as_slice().unwrap());
        }
        for t in [0.0, 0.3, 1.7] {
            let d = g.rhs(&state, t).unwrap();
            let d0 = d.ado(0).to_owned();
            let scale = linalg::max_abs(&d0);
            assert!(linalg::trace(&d0).norm() < 1e-12 * scale.max(1.0));
            for i in 0..d.len() {
                assert!(linalg::hermiticity_deviation(&d.ado(i).to_owned()) < 1e-15 * scale.max(1.0) * 10.0);
            }
        }
    }

    /// Dense unscaled reference of the hierarchy equation, ADO by ADO.
    fn dense_reference(state: &AdoHierarchy, ops: &OperatorSet, bath: &BathParams, f: f64) -> Vec<Array2<C64>> {
        let modes = expansion_coeffs(bath).unwrap();
        let delta = terminator_strength(bath).unwrap() * RAD_PER_FS_PER_CM;
        let h = to_complex(&(&ops.h_s * RAD_PER_FS_PER_CM + &ops.flip * f));
        let q = to_complex(&ops.q_op);
        let hier = state.hierarchy();
        let rho: Vec<Array2<C64>> = (0..state.len()).map(|i| state.ado_unscaled(i)).collect();
        let mut out = Vec::new();
        for (i, idx) in hier.indices().iter().enumerate() {
            let mut d = commutator(&h, &rho[i]).mapv(|z| -I * z);
            let qq = commutator(&q, &commutator(&q, &rho[i]));
            d = d - qq.mapv(|z| z * delta);
            for (k, m) in modes.iter().enumerate() {
                let n = idx.counts[k] as f64;
                d = d - rho[i].mapv(|z| z * n * m.rate_fs());
                if let Some(j) = hier.raise(i, k) {
                    d = d - commutator(&q, &rho[j]).mapv(|z| I * z);
                }
                if let Some(j) = hier.lower(i, k) {
                    let c = m.coeff_fs();
                    let term = q.dot(&rho[j]).mapv(|z| z * c) - rho[j].dot(&q).mapv(|z| z * c.conj());
                    d = d - term.mapv(|z| I * n * z);
                }
            }
            out.push(d);
        }
        out
    }

    #[test]
    fn banded_kernel_matches_dense_reference() {
        let (p, ops) = small_model(1.2, 4);
        let bath = BathParams { eta: 40.0, n_matsubara: 1, ..BathParams::default() };
        for scaled in [true, false] {
            let cfg = PropagatorConfig { depth: 3, use_scaled_ados: scaled, ..PropagatorConfig::default() };
            let drive = DriveField::from_params(&p);
            let g = Generator::new(&ops, &bath, drive, &cfg).unwrap();
            let mut state = g.initial_state(&DensityMatrix::new(random_hermitian(8, 1), Basis::Diabatic), 0.0).unwrap();
            let dd = 64;
            for i in 1..state.len() {
                let m = random_hermitian(8, 50 + i as u64).mapv(|z| z * 1e-3);
                state.as_mut_slice()[i * dd..(i + 1) * dd].copy_from_slice(m.as_slice().unwrap());
            }
            let t = 0.81;
            let got = g.rhs(&state, t).unwrap();
            let want = dense_reference(&state, &ops, &bath, drive.coefficient(t));
            for i in 0..state.len() {
                let gi = got.ado_unscaled(i);
                let err = linalg::max_abs(&(&gi - &want[i]));
                let scale = linalg::max_abs(&want[i]).max(1e-300);
                assert!(err <= 1e-12 * scale, "ado {i} scaled={scaled}: {err:e} vs {scale:e}");
            }
        }
    }

    #[test]
    fn rabi_period_of_calibrated_drive() {
        // δ=0, η=0: the excited population follows sin²(V₀t) up to small
        // counter-rotating corrections.
        let p = VibronicParams { delta: 0.0, n_levels: 2, ..VibronicParams::default() };
        let ops = build_system(&p).unwrap();
        let cfg = PropagatorConfig { record_stride: 20, ..PropagatorConfig::default() };
        let mut prop = Propagator::new(&ops, &closed_bath(), DriveField::from_params(&p), &cfg).unwrap();
        let rho = DensityMatrix::basis_state(4, 0, Basis::Diabatic);
        let mut state = prop.initial_state(&rho, 0.0).unwrap();
        let traj = prop.propagate(&mut state, 2500.0).unwrap();
        let pe: Vec<f64> = traj.states.iter().map(|r| r.excited_population()).collect();
        // locate the first two minima after the start
        let t: Vec<f64> = traj.times_fs.clone();
        let mins: Vec<f64> = (1..pe.len() - 1)
            .filter(|&i| pe[i] < pe[i - 1] && pe[i] <= pe[i + 1] && pe[i] < 0.01)
            .map(|i| t[i])
            .collect();
        let period = mins[0];
        assert!((period - 1000.0).abs() < 20.0, "period {period}");
        let v0 = cm_to_rad_per_fs(p.drive_amp);
        for (ti, pi) in t.iter().zip(&pe).step_by(50) {
            assert!((pi - (v0 * ti).sin().powi(2)).abs() < 0.01);
        }
    }

    #[test]
    fn integrators_agree_and_converge() {
        let (p, ops) = small_model(1.2, 4);
        let bath = BathParams::default();
        let run = |integrator, dt: f64| {
            let cfg = PropagatorConfig { dt, depth: 2, integrator, ..PropagatorConfig::default() };
            let mut prop = Propagator::new(&ops, &bath, DriveField::from_params(&p), &cfg).unwrap();
            let rho = DensityMatrix::basis_state(8, 0, Basis::Diabatic);
            let mut s = prop.initial_state(&rho, 0.0).unwrap();
            prop.propagate_with(&mut s, 100.0, |_, _| {}).unwrap();
            s.physical().elements
        };
        let fine = run(Integrator::LawsonRk4, 0.0125);
        let lawson = run(Integrator::LawsonRk4, 0.05);
        let rk4 = run(Integrator::Rk4, 0.05);
        let scale = linalg::max_abs(&fine);
        assert!(linalg::max_abs(&(&lawson - &fine)) < 1e-7 * scale);
        assert!(linalg::max_abs(&(&rk4 - &fine)) < 1e-4 * scale);
    }

    #[test]
    fn propagation_conserves_trace_and_hermiticity() {
        let (p, ops) = small_model(1.2, 5);
        let bath = BathParams::default();
        let cfg = PropagatorConfig { depth: 3, ..PropagatorConfig::default() };
        let mut prop = Propagator::new(&ops, &bath, DriveField::from_params(&p), &cfg).unwrap();
        let rho = thermal_state(&p, &adiabatize(&ops.h_s).unwrap()).unwrap();
        let mut state = prop.equilibrate(&rho, 200.0).unwrap();
        assert_eq!(state.time, 0.0);
        let traj = prop.propagate(&mut state, 300.0).unwrap();
        assert_eq!(traj.times_fs.len(), 301);
        assert_relative_eq!(traj.times_fs[300], 300.0);
        for r in &traj.states {
            assert!((r.trace() - C64::new(1.0, 0.0)).norm() < 1e-12);
            assert!(r.hermiticity_deviation() < 1e-12);
        }
        assert!(traj.states.last().unwrap().excited_population() > 1e-3);
    }

    #[test]
    fn propagation_is_resumable() {
        let (p, ops) = small_model(1.2, 3);
        let bath = BathParams::default();
        let cfg = PropagatorConfig { depth: 2, ..PropagatorConfig::default() };
        let mut prop = Propagator::new(&ops, &bath, DriveField::from_params(&p), &cfg).unwrap();
        let rho = DensityMatrix::basis_state(6, 0, Basis::Diabatic);
        let mut a = prop.initial_state(&rho, 0.0).unwrap();
        prop.propagate_with(&mut a, 50.0, |_, _| {}).unwrap();
        let mut b = prop.initial_state(&rho, 0.0).unwrap();
        prop.propagate_with(&mut b, 20.0, |_, _| {}).unwrap();
        prop.propagate_with(&mut b, 50.0, |_, _| {}).unwrap();
        // step times differ only by rounding of t₀ + i·dt
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).norm() < 1e-13);
        }
        assert!(prop.propagate_with(&mut b, 50.025, |_, _| {}).is_err());
        assert!(prop.propagate_with(&mut b, 10.0, |_, _| {}).is_err());
    }

    #[test]
    fn instability_is_reported() {
        let (_, ops) = small_model(0.0, 2);
        let cfg = PropagatorConfig { dt: 40.0, ..PropagatorConfig::default() };
        let mut prop = Propagator::new(&ops, &closed_bath(), DriveField::Off, &cfg).unwrap();
        let rho = DensityMatrix::new(random_hermitian(4, 9), Basis::Diabatic);
        let mut cfg_rk = cfg.clone();
        cfg_rk.integrator = Integrator::Rk4;
        let mut rk = Propagator::new(&ops, &closed_bath(), DriveField::Off, &cfg_rk).unwrap();
        let mut s = rk.initial_state(&rho, 0.0).unwrap();
        let err = rk.propagate_with(&mut s, 40.0 * 2000.0, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Instability { .. }), "{err}");
        // Lawson handles the stiff diagonal exactly and stays bounded
        let mut s = prop.initial_state(&rho, 0.0).unwrap();
        prop.propagate_with(&mut s, 400.0, |_, _| {}).unwrap();
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (p, ops) = small_model(1.2, 3);
        let bath = BathParams::default();
        let cfg = PropagatorConfig { depth: 2, ..PropagatorConfig::default() };
        let mut prop = Propagator::new(&ops, &bath, DriveField::from_params(&p), &cfg).unwrap();
        let rho = DensityMatrix::basis_state(6, 0, Basis::Diabatic);
        let mut a = prop.initial_state(&rho, 0.0).unwrap();
        prop.propagate_with(&mut a, 10.0, |_, _| {}).unwrap();
        let mut buf = Vec::new();
        a.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"ADOH0001");
        assert_eq!(buf.len(), 8 + 16 + 8 + 16 * a.as_slice().len());
        let mut b = prop.initial_state(&rho, 0.0).unwrap();
        b.read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(b.time, 10.0);
        let mut truncated = b.clone();
        assert!(truncated.read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let other = Generator::new(&ops, &bath, DriveField::Off, &PropagatorConfig { depth: 3, ..cfg }).unwrap();
        let mut c = other.initial_state(&rho, 0.0).unwrap();
        assert!(matches!(c.read_checkpoint(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
