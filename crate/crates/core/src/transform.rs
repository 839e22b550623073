//! Bijections between constrained parameters and `R^d`.
//!
//! Simplices use the centred stick-breaking map: for a simplex of size `n`,
//! coordinate `y_k` (`k < n-1`) gives the stick fraction
//! `z_k = logistic(y_k - ln(n-1-k))`, so `y = 0` is the centroid. Interval
//! scalars in `(0, 1)` use the logistic map.
//!
//! The `*_backward` functions pull a gradient with respect to the constrained
//! values back to the unconstrained coordinates and add the gradient of the
//! log-Jacobian. The `*_loglinear_grad` functions differentiate `Σ c_k ln x_k`
//! directly in unconstrained space, which stays finite when some `x_k`
//! underflows.

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn offset(n: usize, k: usize) -> f64 {
    ((n - 1 - k) as f64).ln()
}

/// Constrained values of one simplex plus intermediate quantities.
#[derive(Debug, Clone)]
pub struct SimplexForward {
    pub x: Vec<f64>,
    /// `ln x_k`, computed in log space.
    pub log_x: Vec<f64>,
    pub log_jacobian: f64,
    z: Vec<f64>,
}

/// Maps `n - 1` unconstrained coordinates to an `n`-simplex.
pub fn simplex_forward(y: &[f64]) -> SimplexForward {
    let n = y.len() + 1;
    let mut x = Vec::with_capacity(n);
    let mut log_x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n - 1);
    let mut rem = 1.0;
    let mut log_rem = 0.0;
    let mut log_jacobian = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        let t = yk - offset(n, k);
        let zk = logistic(t);
        let log_z = -softplus(-t);
        let log_1mz = -softplus(t);
        x.push(rem * zk);
        log_x.push(log_rem + log_z);
        log_jacobian += log_rem + log_z + log_1mz;
        rem *= 1.0 - zk;
        log_rem += log_1mz;
        z.push(zk);
    }
    x.push(rem);
    log_x.push(log_rem);
    SimplexForward {
        x,
        log_x,
        log_jacobian,
        z,
    }
}

/// Inverse of [`simplex_forward`]; `x` must lie strictly inside the simplex.
///
/// Uses `logit(z_k) = ln x_k - ln Σ_{i>k} x_i`, which avoids the cancellation
/// in `1 - Σ_{i<k} x_i`.
pub fn simplex_inverse(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut tails = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n).rev() {
        acc += x[k];
        tails[k] = acc;
    }
    (0..n - 1)
        .map(|k| {
            let head = x[k].max(f64::MIN_POSITIVE);
            let tail = tails[k + 1].max(f64::MIN_POSITIVE);
            head.ln() - tail.ln() + offset(n, k)
        })
        .collect()
}

/// Gradient of `Σ c_k ln x_k` with respect to `y`.
pub fn simplex_loglinear_grad(fwd: &SimplexForward, c: &[f64]) -> Vec<f64> {
    let n = fwd.x.len();
    let mut out = vec![0.0; n - 1];
    let mut tail: f64 = c[n - 1];
    for k in (0..n - 1).rev() {
        let z = fwd.z[k];
        out[k] = c[k] * (1.0 - z) - z * tail;
        tail += c[k];
    }
    out
}

/// Gradient of the log-Jacobian with respect to `y`.
pub fn simplex_log_jacobian_grad(fwd: &SimplexForward) -> Vec<f64> {
    let n = fwd.x.len();
    (0..n - 1)
        .map(|k| {
            let z = fwd.z[k];
            1.0 - 2.0 * z - z * (n - 2 - k) as f64
        })
        .collect()
}

/// Pulls `∂L/∂x` back to `∂L/∂y` (without the Jacobian term).
pub fn simplex_backward(fwd: &SimplexForward, g_x: &[f64]) -> Vec<f64> {
    let n = fwd.x.len();
    let mut out = vec![0.0; n - 1];
    // rem_k = x_k / z_k for k < n-1; track it forward-consistently instead.
    let mut rems = Vec::with_capacity(n);
    let mut rem = 1.0;
    for &z in &fwd.z {
        rems.push(rem);
        rem *= 1.0 - z;
    }
    let mut g_rem = g_x[n - 1];
    for k in (0..n - 1).rev() {
        let z = fwd.z[k];
        let g_z = (g_x[k] - g_rem) * rems[k];
        g_rem = g_x[k] * z + g_rem * (1.0 - z);
        out[k] = g_z * z * (1.0 - z);
    }
    out
}

/// A `(0, 1)` scalar: value, log value, log complement, log-Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct UnitForward {
    pub x: f64,
    pub log_x: f64,
    pub log_1mx: f64,
    pub log_jacobian: f64,
}

pub fn unit_forward(y: f64) -> UnitForward {
    let log_x = -softplus(-y);
    let log_1mx = -softplus(y);
    UnitForward {
        x: logistic(y),
        log_x,
        log_1mx,
        log_jacobian: log_x + log_1mx,
    }
}

pub fn unit_inverse(x: f64) -> f64 {
    logit(x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

/// Gradient in `y` of `a ln x + b ln(1 - x) + ln J` plus the chain-ruled
/// constrained gradient `g_x`.
pub fn unit_backward(fwd: &UnitForward, a: f64, b: f64, g_x: f64) -> f64 {
    let x = fwd.x;
    // ln J = ln x + ln(1-x) contributes (1 - x) - x
    (a + 1.0) * (1.0 - x) - (b + 1.0) * x + g_x * x * (1.0 - x)
}
