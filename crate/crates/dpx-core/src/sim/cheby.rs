//! Chebyshev lowpass prototype synthesis.
//!
//! Classic g-value recursion for an equiripple response with a prescribed
//! in-band return loss, followed by the standard conversion to mainline
//! coupling coefficients and terminations.

/// Lowpass prototype element values `g[0..=n+1]` for an n-th order
/// Chebyshev filter whose in-band return loss is `rl_db`.
pub fn g_values(n: usize, rl_db: f64) -> Vec<f64> {
    assert!(n >= 1);
    let refl = 10f64.powf(-rl_db / 10.0); // |S11|^2 ripple level
    let lar_db = -10.0 * (1.0 - refl).log10(); // passband insertion ripple
    // Exact form of the handbook constant 17.37 = 40/ln(10); the rounded
    // value shifts the response by ~1e-4, visibly off true equiripple.
    let beta = (1.0 / (lar_db * std::f64::consts::LN_10 / 40.0).tanh()).ln();
    let gamma = (beta / (2.0 * n as f64)).sinh();

    let a = |k: usize| ((2 * k - 1) as f64 * std::f64::consts::PI / (2.0 * n as f64)).sin();
    let b = |k: usize| gamma * gamma + (k as f64 * std::f64::consts::PI / n as f64).sin().powi(2);

    let mut g = vec![1.0; n + 2];
    g[1] = 2.0 * a(1) / gamma;
    for k in 2..=n {
        g[k] = 4.0 * a(k - 1) * a(k) / (b(k - 1) * g[k - 1]);
    }
    g[n + 1] = if n % 2 == 1 {
        1.0
    } else {
        let t = (beta / 4.0).tanh();
        1.0 / (t * t)
    };
    g
}

/// Mainline coupling matrix (n x n, zero diagonal) and terminations
/// `(m, r1, rn)` for an n-th order Chebyshev prototype.
pub fn prototype_couplings(n: usize, rl_db: f64) -> (Vec<f64>, f64, f64) {
    let g = g_values(n, rl_db);
    let mut m = vec![0.0; n * n];
    for i in 1..n {
        // 1-indexed adjacent coupling M_{i,i+1} = 1/sqrt(g_i g_{i+1}).
        let v = 1.0 / (g[i] * g[i + 1]).sqrt();
        m[(i - 1) * n + i] = v;
        m[i * n + (i - 1)] = v;
    }
    let r1 = 1.0 / (g[0] * g[1]);
    let rn = 1.0 / (g[n] * g[n + 1]);
    (m, r1, rn)
}
