//! Problem instances: coefficients `(b, sigma)` of the forward SDE
//! `dX = b(s,X) ds + sigma(s,X) dW`, free term `psi(t, X(t), X(T))` and driver
//! `g(t, s, X(t), X(s), Y(s), Z(t,s), Z(s,t))` of the backward Volterra
//! equation, together with a catalog of instances whose adapted M-solutions
//! are known in closed form.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::TimeMesh;
use crate::scalar::Scalar;

pub type StateFn<T> = Arc<dyn Fn(T, T) -> T + Send + Sync>;
pub type FreeTermFn<T> = Arc<dyn Fn(T, T, T) -> T + Send + Sync>;
pub type DriverFn<T> = Arc<dyn Fn(DriverArgs<T>) -> T + Send + Sync>;

/// Arguments of the driver `g`. `z` is `Z(t,s)`; `z_swapped` is `Z(s,t)`,
/// the below-diagonal value that makes an equation Type-II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverArgs<T> {
    pub t: T,
    pub s: T,
    pub x_t: T,
    pub x_s: T,
    pub y: T,
    pub z: T,
    pub z_swapped: T,
}

/// Martingale integrand of a closed-form solution.
#[derive(Clone)]
pub enum ZForm<T> {
    /// `Z(t,s)` does not depend on the path.
    Deterministic(Arc<dyn Fn(T, T) -> T + Send + Sync>),
    /// `Z(t,s)` as a function of `(t, s, W(s))`.
    Adapted(Arc<dyn Fn(T, T, T) -> T + Send + Sync>),
}

/// Exact adapted M-solution, written in terms of the driving Brownian motion.
#[derive(Clone)]
pub struct ClosedFormSolution<T> {
    y: Arc<dyn Fn(T, T) -> T + Send + Sync>,
    z: ZForm<T>,
}

impl<T: Scalar> ClosedFormSolution<T> {
    pub fn new(y: Arc<dyn Fn(T, T) -> T + Send + Sync>, z: ZForm<T>) -> Self {
        Self { y, z }
    }

    /// `Y(t)` given `W(t)`.
    #[inline]
    pub fn y(&self, t: T, w_t: T) -> T {
        (self.y)(t, w_t)
    }

    /// `Z(t,s)` given `W(s)`.
    #[inline]
    pub fn z(&self, t: T, s: T, w_s: T) -> T {
        match &self.z {
            ZForm::Deterministic(f) => f(t, s),
            ZForm::Adapted(f) => f(t, s, w_s),
        }
    }

    pub fn z_is_deterministic(&self) -> bool {
        matches!(self.z, ZForm::Deterministic(_))
    }
}

impl<T> fmt::Debug for ClosedFormSolution<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.z {
            ZForm::Deterministic(_) => "deterministic",
            ZForm::Adapted(_) => "adapted",
        };
        f.debug_struct("ClosedFormSolution").field("z", &kind).finish()
    }
}

/// Catalog families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Catalog {
    /// `X = W`, `psi = X(T)`, `g = 0`.
    AMartingale,
    /// `X = W`, `psi = X(T)`, `g = -lambda y`.
    CLinearY { lambda: f64 },
    /// `X = W`, `psi = X(T)`, `g = c z_swapped`.
    ELinearZ2 { c: f64 },
    /// Geometric Brownian motion `dX = mu X ds + sigma X dW`, `psi = X(T)`, `g = 0`.
    GbmTerminal { mu: f64, sigma: f64, x0: f64 },
}

impl Catalog {
    pub const NAMES: [&'static str; 4] =
        ["A_martingale", "C_linear_y", "E_linear_z2", "GBM_terminal"];

    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |key: &str, default: f64| -> Result<f64> {
            let v = params.get(key).copied().unwrap_or(default);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidArgument(format!("parameter `{key}` must be finite")))
            }
        };
        let known: &[&str] = match name {
            "A_martingale" => &[],
            "C_linear_y" => &["lambda"],
            "E_linear_z2" => &["c"],
            "GBM_terminal" => &["mu", "sigma", "x0"],
            other => return Err(Error::UnknownInstance(other.to_string())),
        };
        if let Some(k) = params.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "instance `{name}` has no parameter `{k}`"
            )));
        }
        Ok(match name {
            "A_martingale" => Catalog::AMartingale,
            "C_linear_y" => Catalog::CLinearY {
                lambda: get("lambda", 1.0)?,
            },
            "E_linear_z2" => Catalog::ELinearZ2 { c: get("c", 1.0)? },
            _ => Catalog::GbmTerminal {
                mu: get("mu", 0.1)?,
                sigma: get("sigma", 0.4)?,
                x0: get("x0", 1.0)?,
            },
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Catalog::AMartingale => "A_martingale",
            Catalog::CLinearY { .. } => "C_linear_y",
            Catalog::ELinearZ2 { .. } => "E_linear_z2",
            Catalog::GbmTerminal { .. } => "GBM_terminal",
        }
    }
}

/// Coefficient set of a Markovian Type-II BSVIE with scalar state, value and noise.
#[derive(Clone)]
pub struct ProblemInstance<T> {
    pub name: String,
    pub horizon: T,
    pub x0: T,
    /// Lipschitz constant of the coefficients; informational only.
    pub lipschitz: T,
    drift: StateFn<T>,
    diffusion: StateFn<T>,
    free_term: FreeTermFn<T>,
    driver: DriverFn<T>,
    exact_state: Option<StateFn<T>>,
    closed_form: Option<ClosedFormSolution<T>>,
    catalog: Option<Catalog>,
}

impl<T> fmt::Debug for ProblemInstance<T>
where
    T: fmt::Debug,
{
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("catalog", &self.catalog)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> ProblemInstance<T> {
    pub fn new(
        name: impl Into<String>,
        horizon: T,
        x0: T,
        drift: StateFn<T>,
        diffusion: StateFn<T>,
        free_term: FreeTermFn<T>,
        driver: DriverFn<T>,
    ) -> Self {
        Self {
            name: name.into(),
            horizon,
            x0,
            lipschitz: T::one(),
            drift,
            diffusion,
            free_term,
            driver,
            exact_state: None,
            closed_form: None,
            catalog: None,
        }
    }

    pub fn with_lipschitz(mut self, l: T) -> Self {
        self.lipschitz = l;
        self
    }

    /// Exact forward map `X(t) = F(t, W(t))`.
    pub fn with_exact_state(mut self, f: StateFn<T>) -> Self {
        self.exact_state = Some(f);
        self
    }

    pub fn with_closed_form(mut self, cf: ClosedFormSolution<T>) -> Self {
        self.closed_form = Some(cf);
        self
    }

    #[inline]
    pub fn drift(&self, s: T, x: T) -> T {
        (self.drift)(s, x)
    }

    #[inline]
    pub fn diffusion(&self, s: T, x: T) -> T {
        (self.diffusion)(s, x)
    }

    #[inline]
    pub fn free_term(&self, t: T, x_t: T, x_terminal: T) -> T {
        (self.free_term)(t, x_t, x_terminal)
    }

    #[inline]
    pub fn driver(&self, args: DriverArgs<T>) -> T {
        (self.driver)(args)
    }

    pub fn exact_state(&self) -> Option<&StateFn<T>> {
        self.exact_state.as_ref()
    }

    pub fn closed_form(&self) -> Option<&ClosedFormSolution<T>> {
        self.closed_form.as_ref()
    }

    pub fn catalog_entry(&self) -> Option<Catalog> {
        self.catalog
    }
}

/// Builds a catalog instance on `[0, horizon]`.
pub fn catalog<T: Scalar>(
    name: &str,
    params: &BTreeMap<String, f64>,
    horizon: T,
) -> Result<ProblemInstance<T>> {
    if !(horizon > T::zero()) || !horizon.is_finite() {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let entry = Catalog::from_name(name, params)?;
    Ok(instance_for(entry, horizon))
}

pub fn instance_for<T: Scalar>(entry: Catalog, horizon: T) -> ProblemInstance<T> {
    let zero_drift: StateFn<T> = Arc::new(|_, _| T::zero());
    let unit_diffusion: StateFn<T> = Arc::new(|_, _| T::one());
    let terminal_state: FreeTermFn<T> = Arc::new(|_, _, x_terminal| x_terminal);
    let brownian: StateFn<T> = Arc::new(|_, w| w);
    let big_t = horizon;

    let mut inst = match entry {
        Catalog::AMartingale => ProblemInstance::new(
            entry.name(),
            horizon,
            T::zero(),
            zero_drift,
            unit_diffusion,
            terminal_state,
            Arc::new(|_| T::zero()),
        )
        .with_exact_state(brownian)
        .with_closed_form(ClosedFormSolution::new(
            Arc::new(|_, w| w),
            ZForm::Deterministic(Arc::new(|_, _| T::one())),
        )),
        Catalog::CLinearY { lambda } => {
            let lam = T::lit(lambda);
            ProblemInstance::new(
                entry.name(),
                horizon,
                T::zero(),
                zero_drift,
                unit_diffusion,
                terminal_state,
                Arc::new(move |a: DriverArgs<T>| -lam * a.y),
            )
            .with_lipschitz(lam.abs().max(T::one()))
            .with_exact_state(brownian)
            .with_closed_form(ClosedFormSolution::new(
                Arc::new(move |t, w| (-lam * (big_t - t)).exp() * w),
                ZForm::Deterministic(Arc::new(move |t: T, s: T| {
                    (-lam * (big_t - t.max(s))).exp()
                })),
            ))
        }
        Catalog::ELinearZ2 { c } => {
            let c = T::lit(c);
            ProblemInstance::new(
                entry.name(),
                horizon,
                T::zero(),
                zero_drift,
                unit_diffusion,
                terminal_state,
                Arc::new(move |a: DriverArgs<T>| c * a.z_swapped),
            )
            .with_lipschitz(c.abs().max(T::one()))
            .with_exact_state(brownian)
            .with_closed_form(ClosedFormSolution::new(
                Arc::new(move |t, w| w + c * (big_t - t)),
                ZForm::Deterministic(Arc::new(|_, _| T::one())),
            ))
        }
        Catalog::GbmTerminal { mu, sigma, x0 } => {
            let (mu, sig, x0) = (T::lit(mu), T::lit(sigma), T::lit(x0));
            let half = T::lit(0.5);
            let state = move |t: T, w: T| x0 * ((mu - half * sig * sig) * t + sig * w).exp();
            ProblemInstance::new(
                entry.name(),
                horizon,
                x0,
                Arc::new(move |_, x| mu * x),
                Arc::new(move |_, x| sig * x),
                terminal_state,
                Arc::new(|_| T::zero()),
            )
            .with_lipschitz(mu.abs().max(sig.abs()).max(T::one()))
            .with_exact_state(Arc::new(state))
            .with_closed_form(ClosedFormSolution::new(
                Arc::new(move |t, w| state(t, w) * (mu * (big_t - t)).exp()),
                ZForm::Adapted(Arc::new(move |_t, s, w_s| {
                    sig * state(s, w_s) * (mu * (big_t - s)).exp()
                })),
            ))
        }
    };
    inst.catalog = Some(entry);
    inst
}

/// Closed-form values of the backward Euler-Maruyama recursion for catalog
/// instances driven by `X = W`, valid for any increments with conditional
/// mean 0 and conditional variance `dt_k`. Values at column `l` depend on the
/// path only through `W(t_l)`.
#[derive(Debug, Clone)]
pub struct ExactDiscreteScheme<T> {
    mesh: TimeMesh<T>,
    kind: DiscreteKind<T>,
}

#[derive(Debug, Clone)]
enum DiscreteKind<T> {
    Martingale,
    /// `tail[q] = prod_{j=q}^{N-1} (1 - lambda dt_j)`.
    LinearY { tail: Vec<T> },
    LinearZ2 { c: T },
}

impl<T: Scalar> ExactDiscreteScheme<T> {
    /// `Y^pi(t_k, t_l)` for `0 <= l <= N`.
    pub fn y(&self, k: usize, l: usize, w_l: T) -> T {
        match &self.kind {
            DiscreteKind::Martingale => w_l,
            DiscreteKind::LinearY { tail } => {
                let q = if l > k { l } else { k + 1 };
                w_l * tail[q]
            }
            DiscreteKind::LinearZ2 { c } => {
                let from = if l > k { l } else { k + 1 };
                w_l + *c * (self.mesh.horizon() - self.mesh.t(from))
            }
        }
    }

    /// `Z^pi(t_k, t_l)` for `0 <= l < N`; deterministic for every catalog entry.
    pub fn z(&self, k: usize, l: usize) -> T {
        match &self.kind {
            DiscreteKind::Martingale | DiscreteKind::LinearZ2 { .. } => T::one(),
            DiscreteKind::LinearY { tail } => {
                let q = if l >= k { l + 1 } else { k + 1 };
                tail[q]
            }
        }
    }

    pub fn mesh(&self) -> &TimeMesh<T> {
        &self.mesh
    }
}

pub fn exact_discrete_scheme<T: Scalar>(
    instance: &ProblemInstance<T>,
    mesh: &TimeMesh<T>,
) -> Result<ExactDiscreteScheme<T>> {
    if mesh.horizon() != instance.horizon {
        return Err(Error::ShapeMismatch("mesh horizon differs from instance horizon".into()));
    }
    let kind = match instance.catalog {
        Some(Catalog::AMartingale) => DiscreteKind::Martingale,
        Some(Catalog::CLinearY { lambda }) => {
            let lam = T::lit(lambda);
            let n = mesh.cells();
            let mut tail = vec![T::one(); n + 1];
            for q in (0..n).rev() {
                tail[q] = tail[q + 1] * (T::one() - lam * mesh.dt(q));
            }
            DiscreteKind::LinearY { tail }
        }
        Some(Catalog::ELinearZ2 { c }) => DiscreteKind::LinearZ2 { c: T::lit(c) },
        _ => {
            return Err(Error::Unsupported(format!(
                "instance `{}` has no closed-form discrete scheme",
                instance.name
            )))
        }
    };
    Ok(ExactDiscreteScheme {
        mesh: mesh.clone(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{accumulate, generate_increments, NoiseKind};

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn catalog_lookup_errors() {
        assert!(matches!(
            catalog::<f64>("nope", &params(&[]), 1.0),
            Err(Error::UnknownInstance(_))
        ));
        assert!(catalog::<f64>("C_linear_y", &params(&[("lambda", f64::NAN)]), 1.0).is_err());
        assert!(catalog::<f64>("E_linear_z2", &params(&[("lambda", 1.0)]), 1.0).is_err());
        assert!(catalog::<f64>("GBM_terminal", &params(&[("mu", f64::INFINITY)]), 1.0).is_err());
    }

    #[test]
    fn closed_form_values() {
        let a = catalog::<f64>("A_martingale", &params(&[]), 1.0).unwrap();
        let cf = a.closed_form().unwrap();
        assert_eq!(cf.y(0.0, 0.0), 0.0);
        assert_eq!(cf.y(0.3, 0.7), 0.7);

        let c = catalog::<f64>("C_linear_y", &params(&[("lambda", 1.0)]), 1.0).unwrap();
        let cf = c.closed_form().unwrap();
        assert!((cf.y(0.5, 1.0) - 0.606531).abs() < 1e-6);
        assert!((cf.z(0.5, 0.2, 0.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((cf.z(0.2, 0.5, 0.0) - (-0.5f64).exp()).abs() < 1e-15);

        let e = catalog::<f64>("E_linear_z2", &params(&[("c", 1.0)]), 1.0).unwrap();
        let cf = e.closed_form().unwrap();
        assert!((cf.y(0.25, 0.1) - 0.85).abs() < 1e-15);
        assert_eq!(cf.z(0.9, 0.1, 3.0), 1.0);
    }

    /// The closed forms satisfy the backward equation pathwise up to the
    /// discretization of the time and stochastic integrals.
    #[test]
    fn closed_forms_balance_the_equation() {
        let n = 2048;
        let mesh = TimeMesh::uniform(n, 1.0).unwrap();
        let w = accumulate(&generate_increments(&mesh, 1, 64, NoiseKind::Gaussian, 17).unwrap());
        for name in ["A_martingale", "C_linear_y", "E_linear_z2", "GBM_terminal"] {
            let inst = catalog::<f64>(name, &params(&[]), 1.0).unwrap();
            let cf = inst.closed_form().unwrap();
            let xs = inst.exact_state().unwrap();
            let k0 = n / 4; // t = 0.25
            let t = mesh.t(k0);
            let mut sq = 0.0;
            for p in 0..64 {
                let wp = |k: usize| w.get(p, k, 0);
                let x = |k: usize| xs(mesh.t(k), wp(k));
                let mut rhs = inst.free_term(t, x(k0), x(n));
                for k in k0..n {
                    let s = mesh.t(k);
                    let args = DriverArgs {
                        t,
                        s,
                        x_t: x(k0),
                        x_s: x(k),
                        y: cf.y(s, wp(k)),
                        z: cf.z(t, s, wp(k)),
                        z_swapped: cf.z(s, t, wp(k0)),
                    };
                    rhs += inst.driver(args) * mesh.dt(k);
                    rhs -= cf.z(t, s, wp(k)) * (wp(k + 1) - wp(k));
                }
                sq += (cf.y(t, wp(k0)) - rhs).powi(2);
            }
            let rms = (sq / 64.0).sqrt();
            assert!(rms < 0.02, "{name}: residual rms {rms}");
        }
    }

    #[test]
    fn exact_discrete_examples() {
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let c = catalog::<f64>("C_linear_y", &params(&[("lambda", 1.0)]), 1.0).unwrap();
        let ex = exact_discrete_scheme(&c, &mesh).unwrap();
        assert!((ex.y(1, 1, 1.0) - 0.5625).abs() < 1e-15);
        assert_eq!(ex.y(2, 4, 0.3), 0.3);

        let e = catalog::<f64>("E_linear_z2", &params(&[("c", 1.0)]), 1.0).unwrap();
        let ex = exact_discrete_scheme(&e, &mesh).unwrap();
        assert!((ex.y(0, 0, 0.0) - 0.75).abs() < 1e-15);
        assert_eq!(ex.z(3, 1), 1.0);

        let a = catalog::<f64>("A_martingale", &params(&[]), 1.0).unwrap();
        assert_eq!(exact_discrete_scheme(&a, &mesh).unwrap().z(2, 0), 1.0);

        let g = catalog::<f64>("GBM_terminal", &params(&[]), 1.0).unwrap();
        assert!(exact_discrete_scheme(&g, &mesh).is_err());
    }
}
