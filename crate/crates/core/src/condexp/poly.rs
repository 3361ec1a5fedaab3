//! Standardized tensor-monomial bases and their exact one-step conditional moments.

/// Monomials `prod_j z_j^{e_j}` with total degree `<= degree` in the
/// standardized coordinates `z_j = (x_j - center_j) / scale_j`. Coordinates
/// that are (numerically) constant over the sample are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    degree: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<bool>,
    exponents: Vec<Vec<u8>>,
}

impl PolyBasis {
    /// Fits the standardization to `features` (one slice per coordinate).
    pub fn from_sample<F>(features: &[F], degree: usize) -> Self
    where
        F: AsRef<[f64]>,
    {
        let mut center = Vec::with_capacity(features.len());
        let mut scale = Vec::with_capacity(features.len());
        let mut active = Vec::with_capacity(features.len());
        for f in features {
            let f = f.as_ref();
            let n = f.len().max(1) as f64;
            let mean = f.iter().sum::<f64>() / n;
            let var = f.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            let live = sd > 1e-12 * (1.0 + mean.abs()) && sd.is_finite();
            center.push(mean);
            scale.push(if live { sd } else { 1.0 });
            active.push(live);
        }
        Self::with_standardization(degree, center, scale, active)
    }

    pub fn with_standardization(
        degree: usize,
        center: Vec<f64>,
        scale: Vec<f64>,
        active: Vec<bool>,
    ) -> Self {
        let mut exponents = Vec::new();
        let dim = center.len();
        for total in 0..=degree {
            let mut e = vec![0u8; dim];
            push_exponents(&mut exponents, &mut e, 0, total, &active);
        }
        Self {
            degree,
            center,
            scale,
            active,
            exponents,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exponents
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    #[inline]
    fn z(&self, j: usize, x: f64) -> f64 {
        (x - self.center[j]) / self.scale[j]
    }

    /// Powers `z_j^e` for `e = 0..=degree`, flattened per coordinate.
    fn powers(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.degree + 1;
        for j in 0..self.dim() {
            let z = self.z(j, x[j]);
            let row = &mut out[j * stride..(j + 1) * stride];
            row[0] = 1.0;
            for e in 1..stride {
                row[e] = row[e - 1] * z;
            }
        }
    }

    /// Evaluates every basis function at `x`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.degree + 1;
        match self.dim() {
            1 => {
                // Exponents of a single coordinate run 0, 1, 2, ...
                let z = self.z(0, x[0]);
                let mut v = 1.0;
                for o in out.iter_mut().take(self.exponents.len()) {
                    *o = v;
                    v *= z;
                }
            }
            2 if stride <= 16 => {
                let mut pw = [[0.0f64; 16]; 2];
                for (j, row) in pw.iter_mut().enumerate() {
                    let z = self.z(j, x[j]);
                    row[0] = 1.0;
                    for e in 1..stride {
                        row[e] = row[e - 1] * z;
                    }
                }
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    *o = pw[0][e[0] as usize] * pw[1][e[1] as usize];
                }
            }
            _ => {
                let mut pw = vec![0.0; self.dim() * stride];
                self.powers(x, &mut pw);
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    *o = e
                        .iter()
                        .enumerate()
                        .map(|(j, &ej)| pw[j * stride + ej as usize])
                        .product();
                }
            }
        }
    }

    /// `sum_i coef_i phi_i(x)`.
    pub fn eval(&self, coef: &[f64], x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.len()];
        self.eval_into(x, &mut phi);
        phi.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    /// Conditional moments `(E[f(x)], E[f(x) G])` where the last coordinate of
    /// `x` is `mean + sd * G` and the others are held at `fixed`. `moments`
    /// holds `E[G^i]` for `i = 0..=degree + 1`.
    pub fn cond_moments(&self, coef: &[f64], fixed: &[f64], mean: f64, sd: f64, moments: &[f64]) -> (f64, f64) {
        let d = self.dim();
        let c = d - 1;
        let stride = self.degree + 1;
        assert!(d <= 2 && stride <= 8, "conditional moments support d <= 2 and degree <= 7");
        debug_assert!(moments.len() > self.degree + 1);
        // E[(a + bG)^e] and E[(a + bG)^e G].
        let inv = 1.0 / self.scale[c];
        let a = (mean - self.center[c]) * inv;
        let b = sd * inv;
        let mut apow = [1.0f64; 8];
        let mut bpow = [1.0f64; 8];
        for e in 1..stride {
            apow[e] = apow[e - 1] * a;
            bpow[e] = bpow[e - 1] * b;
        }
        let mut mv = [0.0f64; 8];
        let mut mg = [0.0f64; 8];
        for e in 0..stride {
            let row = &BINOMIAL[e];
            let (mut s0, mut s1) = (0.0, 0.0);
            for i in 0..=e {
                let w = row[i] * apow[e - i] * bpow[i];
                s0 += w * moments[i];
                s1 += w * moments[i + 1];
            }
            mv[e] = s0;
            mg[e] = s1;
        }
        let (mut m0, mut m1) = (0.0, 0.0);
        if c == 0 {
            for (coef, e) in coef.iter().zip(&self.exponents) {
                m0 += coef * mv[e[0] as usize];
                m1 += coef * mg[e[0] as usize];
            }
        } else {
            let z = self.z(0, fixed[0]);
            let mut pf = [1.0f64; 8];
            for e in 1..stride {
                pf[e] = pf[e - 1] * z;
            }
            for (coef, e) in coef.iter().zip(&self.exponents) {
                let w = coef * pf[e[0] as usize];
                m0 += w * mv[e[1] as usize];
                m1 += w * mg[e[1] as usize];
            }
        }
        (m0, m1)
    }
}

const BINOMIAL: [[f64; 8]; 8] = {
    let mut t = [[0.0f64; 8]; 8];
    let mut n = 0;
    while n < 8 {
        t[n][0] = 1.0;
        let mut k = 1;
        while k <= n {
            t[n][k] = t[n - 1][k - 1] + if k < n { t[n - 1][k] } else { 0.0 };
            k += 1;
        }
        n += 1;
    }
    t
};

fn push_exponents(out: &mut Vec<Vec<u8>>, e: &mut Vec<u8>, j: usize, left: usize, active: &[bool]) {
    if j == e.len() {
        if left == 0 {
            out.push(e.clone());
        }
        return;
    }
    let top = if active[j] { left } else { 0 };
    for p in (0..=top).rev() {
        e[j] = p as u8;
        push_exponents(out, e, j + 1, left - p, active);
    }
    e[j] = 0;
}
