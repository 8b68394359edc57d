//! Van Genuchten–Mualem constitutive relations.
//!
//! The water retention curve θ(ψ) and hydraulic conductivity K(ψ), together
//! with their first and second derivatives in ψ. Every power of the scaled
//! suction `u = α|ψ|` is formed in log space, so heads arbitrarily close to
//! saturation and very dry heads evaluate without underflow or cancellation.
//!
//! For ψ ≥ 0 the soil is saturated: θ = θ_s, K = K_s and all derivatives are 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the Mualem coupling `m = 1 - 1/n`.
pub const SHAPE_COUPLING_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HydroError {
    #[error("pressure head must be finite, got {0}")]
    NonFiniteHead(f64),
    #[error("invalid soil parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

/// Soil hydraulic constants of the van Genuchten model.
///
/// Units: `ks` in cm/s, `alpha` in 1/cm, water contents and shape exponents
/// dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanGenuchten {
    pub ks: f64,
    pub theta_s: f64,
    pub theta_r: f64,
    pub alpha: f64,
    pub n: f64,
    pub m: f64,
}

/// All constitutive quantities at one head, sharing the power evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Constitutive {
    /// θ(ψ)
    pub theta: f64,
    /// K(ψ), cm/s
    pub k: f64,
    /// dθ/dψ, 1/cm
    pub capacity: f64,
    /// dK/dψ, 1/s
    pub dk: f64,
    /// d²θ/dψ², 1/cm²
    pub dcapacity: f64,
    /// d²K/dψ², 1/(cm·s)
    pub d2k: f64,
}

impl VanGenuchten {
    /// Mualem-coupled parameters, `m = 1 - 1/n`.
    pub fn new(ks: f64, theta_s: f64, theta_r: f64, alpha: f64, n: f64) -> Result<Self, HydroError> {
        Self::with_shape(ks, theta_s, theta_r, alpha, n, 1.0 - 1.0 / n)
    }

    /// Parameters with an explicit `m`, which must satisfy the Mualem coupling.
    pub fn with_shape(
        ks: f64,
        theta_s: f64,
        theta_r: f64,
        alpha: f64,
        n: f64,
        m: f64,
    ) -> Result<Self, HydroError> {
        let p = Self::decoupled(ks, theta_s, theta_r, alpha, n, m)?;
        p.check_coupling()?;
        Ok(p)
    }

    /// Parameters whose `m` is taken as given, without the Mualem coupling.
    ///
    /// The closed forms below hold for any `m > 0`; only the physical reading
    /// of K as the Mualem integral needs the coupling.
    pub fn decoupled(
        ks: f64,
        theta_s: f64,
        theta_r: f64,
        alpha: f64,
        n: f64,
        m: f64,
    ) -> Result<Self, HydroError> {
        let p = Self { ks, theta_s, theta_r, alpha, n, m };
        p.check_ranges()?;
        Ok(p)
    }

    /// The loam of the classic mass-conservative Richards benchmark
    /// (K_s = 0.0092 cm/s, θ_s = 0.368, θ_r = 0.102, α = 0.0335 1/cm, n = 2, m = 0.5).
    pub fn celia_loam() -> Self {
        Self { ks: 0.0092, theta_s: 0.368, theta_r: 0.102, alpha: 0.0335, n: 2.0, m: 0.5 }
    }

    /// Same soil with the shape exponent printed as m = 1.5.
    pub fn celia_loam_printed_shape() -> Self {
        Self { m: 1.5, ..Self::celia_loam() }
    }

    pub fn check_ranges(&self) -> Result<(), HydroError> {
        let bad = |name, reason: &str| Err(HydroError::InvalidParameter { name, reason: reason.into() });
        let all = [self.ks, self.theta_s, self.theta_r, self.alpha, self.n, self.m];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("all", "parameters must be finite");
        }
        if self.ks <= 0.0 {
            return bad("ks", "Ks must be positive");
        }
        if self.alpha <= 0.0 {
            return bad("alpha", "alpha must be positive");
        }
        if self.n <= 1.0 {
            return bad("n", "n must exceed 1");
        }
        if self.m <= 0.0 {
            return bad("m", "m must be positive");
        }
        if !(0.0 <= self.theta_r && self.theta_r < self.theta_s && self.theta_s <= 1.0) {
            return bad("theta", "need 0 <= theta_r < theta_s <= 1");
        }
        Ok(())
    }

    pub fn check_coupling(&self) -> Result<(), HydroError> {
        let gap = (self.m - (1.0 - 1.0 / self.n)).abs();
        if gap > SHAPE_COUPLING_TOL {
            return Err(HydroError::InvalidParameter {
                name: "m",
                reason: format!(
                    "m must equal 1 - 1/n: |m - (1 - 1/n)| = {gap:e} exceeds {SHAPE_COUPLING_TOL:e}"
                ),
            });
        }
        Ok(())
    }

    fn mualem(&self) -> bool {
        (self.m - (1.0 - 1.0 / self.n)).abs() <= SHAPE_COUPLING_TOL
    }

    pub fn water_content(&self, psi: f64) -> Result<f64, HydroError> {
        finite(psi)?;
        Ok(self.eval(psi).theta)
    }

    pub fn hydraulic_conductivity(&self, psi: f64) -> Result<f64, HydroError> {
        finite(psi)?;
        Ok(self.eval(psi).k)
    }

    /// Specific moisture capacity dθ/dψ.
    pub fn moisture_capacity(&self, psi: f64) -> Result<f64, HydroError> {
        finite(psi)?;
        Ok(self.eval(psi).capacity)
    }

    pub fn conductivity_derivative(&self, psi: f64) -> Result<f64, HydroError> {
        finite(psi)?;
        Ok(self.eval(psi).dk)
    }

    pub fn capacity_derivative(&self, psi: f64) -> Result<f64, HydroError> {
        finite(psi)?;
        Ok(self.eval(psi).dcapacity)
    }

    pub fn conductivity_second_derivative(&self, psi: f64) -> Result<f64, HydroError> {
        finite(psi)?;
        Ok(self.eval(psi).d2k)
    }

    /// θ only; the cheap path used when no derivatives are needed.
    #[inline]
    pub fn theta(&self, psi: f64) -> f64 {
        if psi >= 0.0 {
            return self.theta_s;
        }
        let ln_u = (self.alpha * -psi).ln();
        let ln_a = ln_one_plus_exp(self.n * ln_u);
        self.theta_r + (self.theta_s - self.theta_r) * (-self.m * ln_a).exp()
    }

    /// θ and dθ/dψ.
    #[inline]
    pub fn theta_and_capacity(&self, psi: f64) -> (f64, f64) {
        if psi >= 0.0 {
            return (self.theta_s, 0.0);
        }
        let (n, m) = (self.n, self.m);
        let ln_u = (self.alpha * -psi).ln();
        let ln_a = ln_one_plus_exp(n * ln_u);
        let span = self.theta_s - self.theta_r;
        let theta = self.theta_r + span * (-m * ln_a).exp();
        let c = span * m * n * self.alpha * ((n - 1.0) * ln_u - (m + 1.0) * ln_a).exp();
        (theta, c)
    }

    /// K and dK/dψ.
    #[inline]
    pub fn conductivity_and_derivative(&self, psi: f64) -> (f64, f64) {
        if psi >= 0.0 {
            return (self.ks, 0.0);
        }
        let s = self.suction_terms(psi);
        (self.ks * s.b * s.b * s.e, -self.alpha * self.ks * s.p)
    }

    /// Every constitutive quantity at `psi` (assumed finite).
    #[inline]
    pub fn eval(&self, psi: f64) -> Constitutive {
        if psi >= 0.0 {
            return Constitutive { theta: self.theta_s, k: self.ks, ..Constitutive::default() };
        }
        let (n, m, alpha) = (self.n, self.m, self.alpha);
        let span = self.theta_s - self.theta_r;
        let s = self.suction_terms(psi);
        let (ln_u, ln_a) = (s.ln_u, s.ln_a);

        let theta = self.theta_r + span * (-m * ln_a).exp();
        // dθ/du = -span m n u^{n-1} A^{-m-1};  d/dψ = -α d/du
        let cap = span * m * n * alpha * ((n - 1.0) * ln_u - (m + 1.0) * ln_a).exp();
        // d(dθ/dψ)/du = span m n α u^{n-2} A^{-m-2} [(n-1)A - (m+1) n u^n]
        let un = (n * ln_u).exp();
        let a = (ln_a).exp();
        let dcap_du =
            span * m * n * alpha * ((n - 2.0) * ln_u - (m + 2.0) * ln_a).exp() * ((n - 1.0) * a - (m + 1.0) * n * un);
        let dcap = -alpha * dcap_du;

        let k = self.ks * s.b * s.b * s.e;
        let dk = -alpha * self.ks * s.p;
        let d2k = alpha * alpha * self.ks * s.p_u;
        Constitutive { theta, k, capacity: cap, dk, dcapacity: dcap, d2k }
    }

    /// Pieces of K(u)/K_s = B² E with B = 1 - u^{n-1} A^{-m}, E = A^{-m/2},
    /// and P = d(K/K_s)/du, P_u = dP/du.
    #[inline]
    fn suction_terms(&self, psi: f64) -> SuctionTerms {
        let (n, m) = (self.n, self.m);
        let ln_u = (self.alpha * -psi).ln();
        let ln_a = ln_one_plus_exp(n * ln_u);
        // Exponent of G = u^{n-1} A^{-m}; for large u rewrite with ln(1 + u^{-n})
        // so the Mualem case (n - 1 - m n = 0) carries no cancellation.
        let c = if self.mualem() { 0.0 } else { (n - 1.0) - m * n };
        let ln_g = if ln_u > 0.0 {
            c * ln_u - m * ln_one_plus_exp(-n * ln_u)
        } else {
            (n - 1.0) * ln_u - m * ln_a
        };
        let b = -ln_g.exp_m1();
        let e = (-0.5 * m * ln_a).exp();
        let un = (n * ln_u).exp();
        let inv_a = (-ln_a).exp();

        // G_u = u^{n-2} A^{-m-1} H,  H = (n-1) + c u^n
        let h = (n - 1.0) + c * un;
        let g_u = ((n - 2.0) * ln_u - (m + 1.0) * ln_a).exp() * h;
        // G_uu = A^{-m-2} [ (n-2) A H u^{n-3} + u^{2n-3} (c n A - (m+1) n H) ]
        let a = ln_a.exp();
        let first = if n == 2.0 {
            0.0
        } else {
            (n - 2.0) * h * ((n - 3.0) * ln_u - (m + 1.0) * ln_a).exp()
        };
        let second = ((2.0 * n - 3.0) * ln_u - (m + 2.0) * ln_a).exp() * (c * n * a - (m + 1.0) * n * h);
        let g_uu = first + second;
        let b_u = -g_u;
        let b_uu = -g_uu;

        // Q = u^{n-1}/A,  Q_u = u^{n-2} A^{-2} [(n-1) - u^n],  E_u = -(m n / 2) Q E
        let q = ((n - 1.0) * ln_u).exp() * inv_a;
        let q_u = ((n - 2.0) * ln_u - 2.0 * ln_a).exp() * ((n - 1.0) - un);
        let half_mn = 0.5 * m * n;
        let e_u = -half_mn * q * e;

        let p = 2.0 * b * b_u * e - half_mn * b * b * q * e;
        let p_u = 2.0 * (b_u * b_u + b * b_uu) * e + 2.0 * b * b_u * e_u
            - half_mn * (2.0 * b * b_u * q * e + b * b * q_u * e + b * b * q * e_u);
        SuctionTerms { ln_u, ln_a, b, e, p, p_u }
    }
}

struct SuctionTerms {
    ln_u: f64,
    ln_a: f64,
    b: f64,
    e: f64,
    p: f64,
    p_u: f64,
}

fn finite(psi: f64) -> Result<(), HydroError> {
    if psi.is_finite() {
        Ok(())
    } else {
        Err(HydroError::NonFiniteHead(psi))
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
fn ln_one_plus_exp(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
