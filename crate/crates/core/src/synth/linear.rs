//! Linear Gaussian data-generating process with common confounders.
//!
//! ```text
//! U = Z gt + eU,  A = Z pi + U gA + eA,  W = U gW + eW,  Y = A b + U gY + W zeta + eY
//! ```

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::{Column, Dataset, VariableRole};
use crate::error::{IccError, Result};

/// Matrices are stored row-major as nested vectors so specs read naturally in TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDGPSpec {
    pub beta: Vec<f64>,
    pub gamma_y: Vec<f64>,
    /// d_U x d_A
    pub gamma_a: Vec<Vec<f64>>,
    /// d_U x d_W
    pub gamma_w: Vec<Vec<f64>>,
    pub zeta: Vec<f64>,
    /// d_Z x d_A
    pub pi_fs: Vec<Vec<f64>>,
    /// d_Z x d_U
    pub gamma_tilde_z: Vec<Vec<f64>>,
    /// Covariance of (eY, eA, eW, eU), square of size 1 + d_A + d_W + d_U.
    pub noise_cov: Vec<Vec<f64>>,
    pub z_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinVar {
    Y,
    A,
    Z,
    W,
    U,
}

/// Population second moments of (Y, A, Z, W, U); all means are zero.
#[derive(Debug, Clone)]
pub struct LinearMoments {
    pub d_a: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub d_u: usize,
    pub cov: DMatrix<f64>,
}

impl LinearMoments {
    fn offset(&self, v: LinVar) -> (usize, usize) {
        let sizes = [1, self.d_a, self.d_z, self.d_w, self.d_u];
        let k = v as usize;
        (sizes[..k].iter().sum(), sizes[k])
    }

    /// Cov(x, y) block.
    pub fn block(&self, x: LinVar, y: LinVar) -> DMatrix<f64> {
        let (r0, nr) = self.offset(x);
        let (c0, nc) = self.offset(y);
        self.cov.view((r0, c0), (nr, nc)).into_owned()
    }
}

/// One draw of the linear model as matrices.
#[derive(Debug, Clone)]
pub struct LinearSample {
    pub y: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

fn mat(rows: &[Vec<f64>], nr: usize, nc: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(IccError::Spec(format!("{name} must be {nr} x {nc}")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn psd_factor(s: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if (s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
        return Err(IccError::Spec(format!("{name} is not symmetric")));
    }
    let eig = SymmetricEigen::new(s.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(IccError::Spec(format!("{name} is not positive semidefinite")));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

impl LinearDGPSpec {
    /// Confounded reference design: every coefficient 1 except zeta = 0.5,
    /// pi = (1, 0.5), gt = (0.3, -0.2), unit independent noise, Z ~ N(0, I2).
    pub fn confounded_reference() -> Self {
        LinearDGPSpec {
            beta: vec![1.0],
            gamma_y: vec![1.0],
            gamma_a: vec![vec![1.0]],
            gamma_w: vec![vec![1.0]],
            zeta: vec![0.5],
            pi_fs: vec![vec![1.0], vec![0.5]],
            gamma_tilde_z: vec![vec![0.3], vec![-0.2]],
            noise_cov: identity(4),
            z_cov: identity(2),
        }
    }

    pub fn d_a(&self) -> usize {
        self.beta.len()
    }
    pub fn d_u(&self) -> usize {
        self.gamma_y.len()
    }
    pub fn d_w(&self) -> usize {
        self.zeta.len()
    }
    pub fn d_z(&self) -> usize {
        self.pi_fs.len()
    }

    /// Same spec with every confounding coefficient set to zero.
    pub fn without_confounding(&self) -> Self {
        let zero = |m: &Vec<Vec<f64>>| m.iter().map(|r| vec![0.0; r.len()]).collect();
        LinearDGPSpec {
            gamma_y: vec![0.0; self.d_u()],
            gamma_a: zero(&self.gamma_a),
            gamma_w: zero(&self.gamma_w),
            gamma_tilde_z: zero(&self.gamma_tilde_z),
            ..self.clone()
        }
    }

    /// Loading matrix mapping the base vector (Z, eY, eA, eW, eU) to
    /// (Y, A, Z, W, U), plus the base covariance.
    fn loadings(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (da, du, dw, dz) = (self.d_a(), self.d_u(), self.d_w(), self.d_z());
        if da == 0 || dz == 0 {
            return Err(IccError::Spec("need at least one treatment and one instrument".into()));
        }
        let ga = mat(&self.gamma_a, du, da, "gamma_a")?;
        let gw = mat(&self.gamma_w, du, dw, "gamma_w")?;
        let pi = mat(&self.pi_fs, dz, da, "pi_fs")?;
        let gt = mat(&self.gamma_tilde_z, dz, du, "gamma_tilde_z")?;
        let ne = 1 + da + dw + du;
        let sig_e = mat(&self.noise_cov, ne, ne, "noise_cov")?;
        let sig_z = mat(&self.z_cov, dz, dz, "z_cov")?;
        psd_factor(&sig_e, "noise_cov")?;
        psd_factor(&sig_z, "z_cov")?;
        if [&self.beta, &self.gamma_y, &self.zeta]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(IccError::Spec("non-finite coefficient".into()));
        }
        let b = dz + ne;
        let unit = |start: usize, k: usize| {
            let mut e = DMatrix::zeros(k, b);
            for i in 0..k {
                e[(i, start + i)] = 1.0;
            }
            e
        };
        let lz = unit(0, dz);
        let (ey, ea, ew, eu) = (
            unit(dz, 1),
            unit(dz + 1, da),
            unit(dz + 1 + da, dw),
            unit(dz + 1 + da + dw, du),
        );
        let lu = gt.transpose() * &lz + eu;
        let la = pi.transpose() * &lz + ga.transpose() * &lu + ea;
        let lw = gw.transpose() * &lu + ew;
        let beta = DMatrix::from_row_slice(1, da, &self.beta);
        let gy = DMatrix::from_row_slice(1, du, &self.gamma_y);
        let zeta = DMatrix::from_row_slice(1, dw, &self.zeta);
        let ly = beta * &la + gy * &lu + zeta * &lw + ey;
        let total = 1 + da + dz + dw + du;
        let mut l = DMatrix::zeros(total, b);
        let mut row = 0;
        for blk in [&ly, &la, &lz, &lw, &lu] {
            l.view_mut((row, 0), (blk.nrows(), b)).copy_from(blk);
            row += blk.nrows();
        }
        let mut omega = DMatrix::zeros(b, b);
        omega.view_mut((0, 0), (dz, dz)).copy_from(&sig_z);
        omega.view_mut((dz, dz), (ne, ne)).copy_from(&sig_e);
        Ok((l, omega))
    }

    pub fn validate(&self) -> Result<()> {
        self.loadings().map(|_| ())
    }

    pub fn population_moments(&self) -> Result<LinearMoments> {
        let (l, omega) = self.loadings()?;
        Ok(LinearMoments {
            d_a: self.d_a(),
            d_z: self.d_z(),
            d_w: self.d_w(),
            d_u: self.d_u(),
            cov: &l * omega * l.transpose(),
        })
    }

    pub fn sample_matrices(&self, n: usize, seed: u64) -> Result<LinearSample> {
        let (l, omega) = self.loadings()?;
        let root = psd_factor(&omega, "base covariance")?;
        let b = omega.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: DMatrix<f64> = DMatrix::from_fn(n, b, |_, _| StandardNormal.sample(&mut rng));
        let x = xi * root.transpose() * l.transpose();
        let (da, dz, dw, du) = (self.d_a(), self.d_z(), self.d_w(), self.d_u());
        let cols = |start: usize, k: usize| x.columns(start, k).into_owned();
        Ok(LinearSample {
            y: cols(0, 1),
            a: cols(1, da),
            z: cols(1 + da, dz),
            w: cols(1 + da + dz, dw),
            u: cols(1 + da + dz + dw, du),
        })
    }
}

pub(crate) fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Dataset with columns y, a, z1.., w1.., u (latent). Single treatment only.
pub fn sample_linear(spec: &LinearDGPSpec, n: usize, seed: u64) -> Result<Dataset> {
    if spec.d_a() != 1 {
        return Err(IccError::Spec(
            "datasets carry one treatment column; use sample_matrices for d_A > 1".into(),
        ));
    }
    let s = spec.sample_matrices(n, seed)?;
    let col = |m: &DMatrix<f64>, j: usize| m.column(j).iter().copied().collect::<Vec<f64>>();
    let mut cols = vec![
        Column::continuous("y", VariableRole::Outcome, col(&s.y, 0)),
        Column::continuous("a", VariableRole::Treatment, col(&s.a, 0)),
    ];
    for j in 0..s.z.ncols() {
        cols.push(Column::continuous(
            format!("z{}", j + 1),
            VariableRole::Instrument,
            col(&s.z, j),
        ));
    }
    for j in 0..s.w.ncols() {
        cols.push(Column::continuous(
            format!("w{}", j + 1),
            VariableRole::OutcomeProxy,
            col(&s.w, j),
        ));
    }
    for j in 0..s.u.ncols() {
        let name = if s.u.ncols() == 1 {
            "u".to_string()
        } else {
            format!("u{}", j + 1)
        };
        cols.push(Column::continuous(name, VariableRole::LatentConfounder, col(&s.u, j)));
    }
    Dataset::new(cols, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_covariances_by_hand() {
        let m = LinearDGPSpec::confounded_reference().population_moments().unwrap();
        // Cov(Z, A) = pi + gt * gA
        let za = m.block(LinVar::Z, LinVar::A);
        assert!((za[(0, 0)] - 1.3).abs() < 1e-14 && (za[(1, 0)] - 0.3).abs() < 1e-14);
        let zw = m.block(LinVar::Z, LinVar::W);
        assert!((zw[(0, 0)] - 0.3).abs() < 1e-14 && (zw[(1, 0)] + 0.2).abs() < 1e-14);
        // Cov(Z, Y) = 1.3 + 0.3 + 0.5*0.3 = 1.75 and 0.3 - 0.2 - 0.1 = 0
        let zy = m.block(LinVar::Z, LinVar::Y);
        assert!((zy[(0, 0)] - 1.75).abs() < 1e-14 && zy[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn non_psd_rejected() {
        let mut s = LinearDGPSpec::confounded_reference();
        s.z_cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(s.validate(), Err(IccError::Spec(_))));
    }

    #[test]
    fn seeded_sample_is_deterministic() {
        let s = LinearDGPSpec::confounded_reference();
        let a = sample_linear(&s, 50, 77).unwrap();
        assert_eq!(a, sample_linear(&s, 50, 77).unwrap());
        let names: Vec<&str> = a.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["y", "a", "z1", "z2", "w1", "u"]);
    }
}
