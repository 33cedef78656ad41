//! Brute-force bounded-Lipschitz distance by vertex enumeration.
//!
//! The distance is the LP `max sum_j c_j f_j` over `|f_j| <= 1` and
//! `|f_{j+1} - f_j| <= x_{j+1} - x_j` on the merged support. At a vertex the
//! tight difference constraints split the support into contiguous blocks, and
//! each block carries exactly one tight bound `f_a = +-1`. Enumerating every
//! such pattern visits every vertex.

#![allow(dead_code)]

use wps_core::AtomicMeasure;

/// Merged support and signed mass differences `mu - nu`.
pub fn signed_support(mu: &AtomicMeasure, nu: &AtomicMeasure) -> (Vec<f64>, Vec<f64>) {
    let mut pts: Vec<(f64, f64)> = mu
        .atoms()
        .iter()
        .map(|a| (a.location, a.mass))
        .chain(nu.atoms().iter().map(|a| (a.location, -a.mass)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut xs: Vec<f64> = Vec::new();
    let mut cs: Vec<f64> = Vec::new();
    for (x, c) in pts {
        if xs.last() == Some(&x) {
            *cs.last_mut().unwrap() += c;
        } else {
            xs.push(x);
            cs.push(c);
        }
    }
    (xs, cs)
}

pub fn bl_vertex_enumeration(mu: &AtomicMeasure, nu: &AtomicMeasure) -> f64 {
    let (xs, cs) = signed_support(mu, nu);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let gaps: Vec<f64> = xs.windows(2).map(|p| p[1] - p[0]).collect();
    let mut best = f64::NEG_INFINITY;
    // link states: 0 = slack, 1 = f_{j+1} = f_j + d_j, 2 = f_{j+1} = f_j - d_j
    let links = 3usize.pow((n - 1) as u32);
    let mut f = vec![0.0; n];
    for code in 0..links {
        let mut state = Vec::with_capacity(n - 1);
        let mut c = code;
        for _ in 0..n - 1 {
            state.push(c % 3);
            c /= 3;
        }
        let mut blocks: Vec<(usize, usize)> = Vec::new();
        let mut start = 0;
        for j in 0..n - 1 {
            if state[j] == 0 {
                blocks.push((start, j + 1));
                start = j + 1;
            }
        }
        blocks.push((start, n));
        let choices: Vec<usize> = blocks.iter().map(|(a, b)| 2 * (b - a)).collect();
        let total: usize = choices.iter().product();
        'anchor: for mut pick in 0..total {
            for (bi, &(a, b)) in blocks.iter().enumerate() {
                let k = pick % choices[bi];
                pick /= choices[bi];
                let anchor = a + k / 2;
                f[anchor] = if k % 2 == 0 { 1.0 } else { -1.0 };
                for j in anchor + 1..b {
                    f[j] = f[j - 1]
                        + if state[j - 1] == 1 {
                            gaps[j - 1]
                        } else {
                            -gaps[j - 1]
                        };
                }
                for j in (a..anchor).rev() {
                    f[j] = f[j + 1] - if state[j] == 1 { gaps[j] } else { -gaps[j] };
                }
            }
            for j in 0..n {
                if f[j].abs() > 1.0 + 1e-12 {
                    continue 'anchor;
                }
                if j + 1 < n && (f[j + 1] - f[j]).abs() > gaps[j] + 1e-12 {
                    continue 'anchor;
                }
            }
            let value: f64 = f.iter().zip(&cs).map(|(a, b)| a * b).sum();
            best = best.max(value);
        }
    }
    best.max(0.0)
}
