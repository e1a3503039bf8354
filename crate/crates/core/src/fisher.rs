//! Fisher information of all node positions and the relative squared
//! position error bound (SPEB).
//!
//! Every scalar measurement `t` contributes a rank-one term `c_t a_t a_t^T`
//! to the information matrix, where `c_t = 1 / sigma_t^2` depends on the
//! bits spent on it and `a_t` carries the measurement gradient `+g` on one
//! node and `-g` on the other. The matrix therefore annihilates the three
//! global translations; the relative bound is the trace of its inverse on
//! the orthogonal complement of that null space.
//!
//! Two routes compute the bound:
//!
//! - [`relative_speb_projected`] forms `U^T J U` for the explicit
//!   [`ProjectionBasis`] and takes the trace of its inverse through a
//!   Cholesky factorization.
//! - [`SpebEvaluator`] never forms `J`. It pins the last vehicle, eliminates
//!   the block-diagonal feature part and recovers the same trace from the
//!   resulting generalized inverse. It also yields the gradient with respect
//!   to every bit count in `O(D)` small-matrix operations, which is what
//!   the optimizers call.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::measurement::{noise_spec, Linearization, MeasurementModel, NoiseSpec};
use crate::scene::Scenario;

/// Largest admissible condition number of the projected information matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Ordering of scalar measurements inside a bit allocation.
///
/// Camera block first: axis-major (x coordinates of every `(feature,
/// vehicle)` pair, then y), features outer and vehicles inner. Range block
/// second: vehicle pairs `(a, b)`, `a < b`, lexicographic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_features: usize,
    pub n_vehicles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurement {
    Pixel {
        feature: usize,
        vehicle: usize,
        axis: usize,
    },
    Range {
        first: usize,
        second: usize,
    },
}

impl Layout {
    pub fn new(n_features: usize, n_vehicles: usize) -> Layout {
        Layout {
            n_features,
            n_vehicles,
        }
    }

    pub fn camera_len(&self) -> usize {
        2 * self.n_features * self.n_vehicles
    }

    pub fn range_len(&self) -> usize {
        self.n_vehicles * self.n_vehicles.saturating_sub(1) / 2
    }

    /// Length of the bit allocation vector.
    pub fn dim(&self) -> usize {
        self.camera_len() + self.range_len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_features + self.n_vehicles
    }

    /// Side length of the information matrix.
    pub fn fim_dim(&self) -> usize {
        3 * self.n_nodes()
    }

    pub fn feature_node(&self, feature: usize) -> usize {
        feature
    }

    pub fn vehicle_node(&self, vehicle: usize) -> usize {
        self.n_features + vehicle
    }

    pub fn camera_index(&self, feature: usize, vehicle: usize, axis: usize) -> usize {
        debug_assert!(axis < 2 && feature < self.n_features && vehicle < self.n_vehicles);
        axis * self.n_features * self.n_vehicles + feature * self.n_vehicles + vehicle
    }

    pub fn pair_index(&self, first: usize, second: usize) -> usize {
        debug_assert!(first < second && second < self.n_vehicles);
        let n = self.n_vehicles;
        first * (2 * n - first - 1) / 2 + (second - first - 1)
    }

    pub fn range_index(&self, first: usize, second: usize) -> usize {
        self.camera_len() + self.pair_index(first, second)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n_vehicles;
        (0..n).flat_map(move |a| (a + 1..n).map(move |b| (a, b)))
    }

    pub fn measurement(&self, index: usize) -> Measurement {
        let per_axis = self.n_features * self.n_vehicles;
        if index < self.camera_len() {
            let axis = index / per_axis;
            let rem = index % per_axis;
            Measurement::Pixel {
                feature: rem / self.n_vehicles,
                vehicle: rem % self.n_vehicles,
                axis,
            }
        } else {
            let mut p = index - self.camera_len();
            let n = self.n_vehicles;
            for first in 0..n {
                let row = n - first - 1;
                if p < row {
                    return Measurement::Range {
                        first,
                        second: first + 1 + p,
                    };
                }
                p -= row;
            }
            panic!("measurement index {index} out of range for {self:?}")
        }
    }

    pub fn is_camera(&self, index: usize) -> bool {
        index < self.camera_len()
    }
}

/// Bits per scalar measurement, ordered by [`Layout`]. Real-valued while
/// optimizing, integral on output.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    layout: Layout,
    bits: Vec<f64>,
}

impl BitAllocation {
    pub fn new(layout: Layout, bits: Vec<f64>) -> Result<BitAllocation> {
        if bits.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                got: bits.len(),
            });
        }
        if let Some(bad) = bits.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "bit counts must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(BitAllocation { layout, bits })
    }

    pub fn filled(layout: Layout, value: f64) -> BitAllocation {
        BitAllocation::new(layout, vec![value; layout.dim()]).expect("valid fill value")
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn bits(&self) -> &[f64] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<f64> {
        self.bits
    }

    pub fn total(&self) -> f64 {
        self.bits.iter().sum()
    }

    /// Fraction of the total spent on camera coordinates.
    pub fn camera_share(&self) -> f64 {
        let total = self.total();
        if total > 0.0 {
            self.bits[..self.layout.camera_len()].iter().sum::<f64>() / total
        } else {
            0.0
        }
    }

    pub fn is_integral(&self) -> bool {
        self.bits.iter().all(|b| b.fract() == 0.0)
    }

    pub fn check_layout(&self, layout: Layout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                got: self.bits.len(),
            });
        }
        Ok(())
    }
}

/// Symmetric information matrix over all node positions, features first.
#[derive(Debug, Clone, PartialEq)]
pub struct FimMatrix {
    pub layout: Layout,
    pub matrix: DMatrix<f64>,
}

impl FimMatrix {
    /// Translation vectors `v_x, v_y, v_z` (unnormalized).
    pub fn translation_vectors(&self) -> [DVector<f64>; 3] {
        translation_vectors(self.layout.n_nodes())
    }
}

fn translation_vectors(n_nodes: usize) -> [DVector<f64>; 3] {
    std::array::from_fn(|axis| DVector::from_fn(3 * n_nodes, |r, _| f64::from(r % 3 == axis)))
}

fn view_rows(scenario: &Scenario, vehicle: usize) -> Result<Matrix3<f64>> {
    Ok(scenario.calibration()? * scenario.vehicles[vehicle].rotation.transpose())
}

fn check_alloc(scenario: &Scenario, alloc: &BitAllocation) -> Result<Layout> {
    let layout = scenario.layout();
    alloc.check_layout(layout)?;
    Ok(layout)
}

/// Information about feature `i` contributed by the image of vehicle `j`:
/// `sum_k (f3 v_k - f_k v_3)(f3 v_k - f_k v_3)^T / sigma_k^2`.
pub fn g_matrix(scenario: &Scenario, alloc: &BitAllocation, i: usize, j: usize) -> Result<Matrix3<f64>> {
    let layout = check_alloc(scenario, alloc)?;
    let view = view_rows(scenario, j)?;
    let d = scenario.features[i].position - scenario.vehicles[j].position;
    let depth = view.row(2).dot(&d.transpose());
    if !(depth > crate::scene::DEPTH_EPSILON) {
        return Err(Error::Cheirality {
            feature: i,
            vehicle: j,
            depth,
        });
    }
    let f = |k: usize| view.row(k).dot(&d.transpose()) / (depth * depth);
    let v3 = view.row(2).transpose();
    let mut g = Matrix3::zeros();
    for k in 0..2 {
        let index = layout.camera_index(i, j, k);
        let weight = noise_spec(scenario, index).information(alloc.bits()[index]);
        if weight == 0.0 {
            continue;
        }
        let a = view.row(k).transpose() * f(2) - v3 * f(k);
        g += a * a.transpose() * weight;
    }
    Ok(g)
}

/// Range information between vehicles `i` and `j`: `w w^T / sigma^2` with
/// `w` the unit vector from `x_j` to `x_i`.
pub fn s_matrix(scenario: &Scenario, alloc: &BitAllocation, i: usize, j: usize) -> Result<Matrix3<f64>> {
    let layout = check_alloc(scenario, alloc)?;
    if i == j {
        return Err(Error::InvalidInput("range pair needs two distinct vehicles".into()));
    }
    let diff = scenario.vehicles[i].position - scenario.vehicles[j].position;
    let dist = diff.norm();
    if !(dist > crate::scene::DEPTH_EPSILON) {
        return Err(Error::DegenerateGeometry(format!("vehicles {i} and {j} coincide")));
    }
    let w = diff / dist;
    let index = layout.range_index(i.min(j), i.max(j));
    let weight = noise_spec(scenario, index).information(alloc.bits()[index]);
    Ok(w * w.transpose() * weight)
}

/// One rank-one information term.
#[derive(Debug, Clone, Copy)]
struct Term {
    first: usize,
    second: usize,
    direction: Vector3<f64>,
    noise: NoiseSpec,
}

fn terms(scenario: &Scenario) -> Result<Vec<Term>> {
    let model = MeasurementModel::new(scenario)?;
    let lins = model.linearize(&scenario.stacked_positions())?;
    Ok(lins
        .into_iter()
        .enumerate()
        .map(|(index, Linearization { direction, nodes, .. })| Term {
            first: nodes.0,
            second: nodes.1,
            direction,
            noise: noise_spec(scenario, index),
        })
        .collect())
}

fn add_block(m: &mut DMatrix<f64>, r: usize, c: usize, block: &Matrix3<f64>) {
    let mut view = m.fixed_view_mut::<3, 3>(3 * r, 3 * c);
    view += block;
}

/// Full information matrix `J = J_1 + J_2` for an allocation.
pub fn assemble_fim(scenario: &Scenario, alloc: &BitAllocation) -> Result<FimMatrix> {
    let layout = check_alloc(scenario, alloc)?;
    let n = layout.fim_dim();
    let mut matrix = DMatrix::zeros(n, n);
    for (term, &bits) in terms(scenario)?.iter().zip(alloc.bits()) {
        let weight = term.noise.information(bits);
        if weight == 0.0 {
            continue;
        }
        let block = term.direction * term.direction.transpose() * weight;
        add_block(&mut matrix, term.first, term.first, &block);
        add_block(&mut matrix, term.second, term.second, &block);
        add_block(&mut matrix, term.first, term.second, &(-block));
        add_block(&mut matrix, term.second, term.first, &(-block));
    }
    Ok(FimMatrix { layout, matrix })
}

/// Orthonormal split of position space into the translation directions
/// `u_tilde` and their complement `u`.
///
/// `u` is what Gram-Schmidt produces when the identity columns are
/// orthonormalized in order against `u_tilde`, dropping the three columns
/// of the last node (which become dependent). Column `3p + a` is
/// proportional to `(n - 1 - p) e_{p,a} - sum_{q > p} e_{q,a}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub u_tilde: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

/// Fixed translation-free basis for `n_f` features and `n_v` vehicles.
pub fn projection_basis(n_f: usize, n_v: usize) -> Result<ProjectionBasis> {
    let n = n_f + n_v;
    if n < 2 {
        return Err(Error::InvalidInput("need at least two nodes".into()));
    }
    let dim = 3 * n;
    let scale = 1.0 / (n as f64).sqrt();
    let u_tilde = DMatrix::from_fn(dim, 3, |r, c| if r % 3 == c { scale } else { 0.0 });
    let mut u = DMatrix::zeros(dim, dim - 3);
    for p in 0..n - 1 {
        let head = (n - 1 - p) as f64;
        let norm = (head * (head + 1.0)).sqrt();
        for a in 0..3 {
            let col = 3 * p + a;
            u[(3 * p + a, col)] = head / norm;
            for q in p + 1..n {
                u[(3 * q + a, col)] = -1.0 / norm;
            }
        }
    }
    Ok(ProjectionBasis { u_tilde, u })
}

impl ProjectionBasis {
    /// `U^T J U`.
    pub fn project(&self, fim: &DMatrix<f64>) -> DMatrix<f64> {
        self.u.transpose() * fim * &self.u
    }
}

/// `trace((U^T J U)^{-1})` through a Cholesky factorization, with a
/// 1-norm condition number guard.
pub fn relative_speb_projected(fim: &FimMatrix, basis: &ProjectionBasis) -> Result<f64> {
    let mut m = basis.project(&fim.matrix);
    let sym = (&m + m.transpose()) * 0.5;
    m.copy_from(&sym);
    let norm = one_norm(&m);
    let chol = m.cholesky().ok_or(Error::Unobservable {
        condition: f64::INFINITY,
    })?;
    let inv = chol.inverse();
    let condition = norm * one_norm(&inv);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Unobservable { condition });
    }
    Ok(inv.trace())
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Relative SPEB of an allocation, m^2.
pub fn relative_speb(scenario: &Scenario, alloc: &BitAllocation) -> Result<f64> {
    check_alloc(scenario, alloc)?;
    SpebEvaluator::new(scenario)?.speb(alloc.bits())
}

/// Gradient of the relative SPEB with respect to every bit count.
pub fn speb_gradient(scenario: &Scenario, alloc: &BitAllocation) -> Result<Vec<f64>> {
    check_alloc(scenario, alloc)?;
    Ok(SpebEvaluator::new(scenario)?.speb_and_gradient(alloc.bits())?.1)
}

/// Precomputed geometry for fast repeated evaluation of the bound at
/// different allocations of the same scenario.
#[derive(Debug, Clone)]
pub struct SpebEvaluator {
    layout: Layout,
    terms: Vec<Term>,
}

/// Block elimination of the information matrix with the last vehicle
/// pinned. `G` below is the generalized inverse obtained by inverting the
/// pinned matrix and padding with zeros; `trace(J^+) = trace(G) -
/// trace(U_tilde^T G U_tilde)`.
struct Elimination {
    /// `A_i^{-1}` per feature.
    a_inv: Vec<Matrix3<f64>>,
    /// `A^{-1} B_p`, `3 n_f x 3 m` with `m` unpinned vehicles.
    e: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    ete: DMatrix<f64>,
    /// Sum of the row blocks of `E` minus the stacked identities, `3 x 3m`.
    f: DMatrix<f64>,
    speb: f64,
}

fn invert_spd3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let eig = SymmetricEigen::new(*m);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Unobservable { condition });
    }
    let inv_diag = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

fn invert_spd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Unobservable { condition });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

impl SpebEvaluator {
    pub fn new(scenario: &Scenario) -> Result<SpebEvaluator> {
        scenario.validate()?;
        Ok(SpebEvaluator {
            layout: scenario.layout(),
            terms: terms(scenario)?,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn noise(&self, index: usize) -> NoiseSpec {
        self.terms[index].noise
    }

    /// `log2(W_k / sigma'_ijk)` for every entry.
    pub fn concavity_thresholds(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.noise.concavity_threshold()).collect()
    }

    fn check_bits(&self, bits: &[f64]) -> Result<()> {
        if bits.len() != self.layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.dim(),
                got: bits.len(),
            });
        }
        Ok(())
    }

    pub fn speb(&self, bits: &[f64]) -> Result<f64> {
        self.check_bits(bits)?;
        Ok(self.eliminate(bits)?.speb)
    }

    pub fn speb_and_gradient(&self, bits: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_bits(bits)?;
        let el = self.eliminate(bits)?;
        let n_nodes = self.layout.n_nodes() as f64;
        let nf = self.layout.n_features;
        let m = self.layout.n_vehicles - 1;
        let mut grad = Vec::with_capacity(bits.len());
        let mut q = DVector::zeros(3 * m);
        for (term, &b) in self.terms.iter().zip(bits) {
            let slope = term.noise.information_slope(b);
            if slope == 0.0 {
                grad.push(0.0);
                continue;
            }
            // q = E^T a_features - a_vehicles (pinned vehicle dropped)
            q.fill(0.0);
            let mut h = Vector3::zeros();
            let mut feature_row = None;
            for (node, sign) in [(term.first, 1.0), (term.second, -1.0)] {
                let g = term.direction * sign;
                if node < nf {
                    let rows = el.e.rows(3 * node, 3);
                    q += rows.transpose() * g;
                    h = el.a_inv[node] * g;
                    feature_row = Some(node);
                } else if node - nf < m {
                    let v = node - nf;
                    let mut seg = q.rows_mut(3 * v, 3);
                    seg -= g;
                }
            }
            let r = &el.s_inv * &q;
            let mut norm2 = r.dot(&(&el.ete * &r)) + r.norm_squared() + h.norm_squared();
            if let Some(i) = feature_row {
                let er: Vector3<f64> = Vector3::from_iterator((el.e.rows(3 * i, 3) * &r).iter().copied());
                norm2 += 2.0 * h.dot(&er);
            }
            let s: Vector3<f64> = h + Vector3::from_iterator((&el.f * &r).iter().copied());
            let projected = norm2 - s.norm_squared() / n_nodes;
            grad.push(-projected.max(0.0) * slope);
        }
        Ok((el.speb, grad))
    }

    fn eliminate(&self, bits: &[f64]) -> Result<Elimination> {
        let nf = self.layout.n_features;
        let nv = self.layout.n_vehicles;
        let m = nv - 1;

        let mut a = vec![Matrix3::zeros(); nf];
        // G_ij blocks of the feature/vehicle coupling, row-major (i, j).
        let mut g = vec![Matrix3::zeros(); nf * nv];
        let mut v = DMatrix::zeros(3 * nv, 3 * nv);
        for (term, &b) in self.terms.iter().zip(bits) {
            let weight = term.noise.information(b);
            if weight == 0.0 {
                continue;
            }
            let block = term.direction * term.direction.transpose() * weight;
            if term.first < nf {
                let (i, j) = (term.first, term.second - nf);
                a[i] += block;
                g[i * nv + j] += block;
                add_block(&mut v, j, j, &block);
            } else {
                let (p, q) = (term.first - nf, term.second - nf);
                add_block(&mut v, p, p, &block);
                add_block(&mut v, q, q, &block);
                add_block(&mut v, p, q, &(-block));
                add_block(&mut v, q, p, &(-block));
            }
        }

        let a_inv = a.iter().map(invert_spd3).collect::<Result<Vec<_>>>()?;

        // B_p has blocks -G_ij; E = A^{-1} B_p.
        let mut e = DMatrix::zeros(3 * nf, 3 * m);
        let mut s = v.view((0, 0), (3 * m, 3 * m)).into_owned();
        for i in 0..nf {
            for j in 0..m {
                let block = -(a_inv[i] * g[i * nv + j]);
                e.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&block);
            }
            // S = V_p - sum_i B_i^T E_i
            for j in 0..m {
                let gij = g[i * nv + j];
                if gij == Matrix3::zeros() {
                    continue;
                }
                for l in 0..m {
                    let e_il = e.fixed_view::<3, 3>(3 * i, 3 * l);
                    let prod = gij * e_il;
                    let mut sv = s.fixed_view_mut::<3, 3>(3 * j, 3 * l);
                    sv += prod;
                }
            }
        }
        let s_inv = invert_spd(s)?;

        let ete = e.transpose() * &e;
        let mut f = DMatrix::zeros(3, 3 * m);
        for i in 0..nf {
            f += e.rows(3 * i, 3);
        }
        for j in 0..m {
            let mut fv = f.fixed_view_mut::<3, 3>(0, 3 * j);
            fv -= Matrix3::identity();
        }

        let tr_a: f64 = a_inv.iter().map(|x| x.trace()).sum();
        let sum_a: Matrix3<f64> = a_inv.iter().sum();
        let mut inner = ete.clone();
        for d in 0..3 * m {
            inner[(d, d)] += 1.0;
        }
        let trace_g = tr_a + (&s_inv * inner).trace();
        let block_sum = (&f * &s_inv * f.transpose()).trace() + sum_a.trace();
        let speb = trace_g - block_sum / self.layout.n_nodes() as f64;
        if !(speb.is_finite() && speb > 0.0) {
            return Err(Error::Unobservable {
                condition: f64::INFINITY,
            });
        }
        Ok(Elimination {
            a_inv,
            e,
            s_inv,
            ete,
            f,
            speb,
        })
    }
}
