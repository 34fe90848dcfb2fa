#![allow(dead_code)]

pub type M8 = [[f64; 8]; 8];

pub fn matmul(a: &M8, b: &M8) -> M8 {
    let mut c = [[0.0; 8]; 8];
    for i in 0..8 {
        for k in 0..8 {
            for j in 0..8 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// exp(a * t) by scaling and squaring with a 20-term Taylor series.
pub fn expm(a: &M8, t: f64) -> M8 {
    let norm = a.iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max) * t;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = t / 2f64.powi(squarings as i32);
    let mut x = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            x[i][j] = a[i][j] * scale;
        }
    }
    let mut sum = [[0.0; 8]; 8];
    let mut term = [[0.0; 8]; 8];
    for i in 0..8 {
        sum[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for n in 1..=20 {
        term = matmul(&term, &x);
        for i in 0..8 {
            for j in 0..8 {
                term[i][j] /= n as f64;
                sum[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        sum = matmul(&sum, &sum);
    }
    sum
}

/// Composite Simpson rule with `pieces` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    let mut s = f(a) + f(b);
    for i in 1..pieces {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn hamming(a: usize, b: usize) -> u32 {
    ((a ^ b) as u32).count_ones()
}
