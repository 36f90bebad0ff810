use crate::error::{Error, Result};

/// Least-squares smoothing coefficients for a centred window.
pub fn savgol_coeffs(window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || polyorder >= window {
        return Err(Error::invalid(format!(
            "Savitzky-Golay needs an odd window above the order, got window {window}, order {polyorder}"
        )));
    }
    let half = (window / 2) as i64;
    let p = polyorder + 1;
    // Normal equations A^T A c = e_0; coefficient i is (A (A^T A)^-1 e_0)_i.
    let mut ata = vec![vec![0.0f64; p]; p];
    for z in -half..=half {
        for (r, row) in ata.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += (z as f64).powi((r + c) as i32);
            }
        }
    }
    let mut rhs = vec![0.0; p];
    rhs[0] = 1.0;
    let sol = solve(ata, rhs)?;
    Ok((-half..=half)
        .map(|z| {
            sol.iter()
                .enumerate()
                .map(|(j, s)| s * (z as f64).powi(j as i32))
                .sum()
        })
        .collect())
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Numerical("singular Savitzky-Golay system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Index of `i` (possibly outside `0..n`) after mirror padding that does
/// not repeat the edge sample.
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Savitzky-Golay smoothing with mirror-padded edges.
pub fn savgol(x: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    let coeffs = savgol_coeffs(window, polyorder)?;
    if x.len() < window {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than the window {window}",
            x.len()
        )));
    }
    let half = (window / 2) as isize;
    Ok((0..x.len() as isize)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * x[mirror_index(i + k as isize - half, x.len())])
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_centre_is_17_over_35() {
        let mut x = vec![0.0; 11];
        x[5] = 1.0;
        let y = savgol(&x, 5, 2).unwrap();
        assert!((y[5] - 17.0 / 35.0).abs() < 1e-12);
        let c = savgol_coeffs(5, 2).unwrap();
        let want = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reproduces_quadratics_and_constants() {
        let x: Vec<f64> = (0..40).map(|i| 0.3 * (i * i) as f64 - 2.0 * i as f64 + 5.0).collect();
        let y = savgol(&x, 9, 2).unwrap();
        for i in 4..36 {
            assert!((x[i] - y[i]).abs() < 1e-10 * x[i].abs().max(1.0));
        }
        let y = savgol(&[2.5; 12], 9, 2).unwrap();
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(savgol(&[0.0; 10], 4, 2).is_err());
        assert!(savgol(&[0.0; 10], 5, 5).is_err());
        assert!(savgol(&[0.0; 3], 5, 2).is_err());
    }

    #[test]
    fn mirror_does_not_repeat_edges() {
        assert_eq!(mirror_index(-1, 5), 1);
        assert_eq!(mirror_index(-2, 5), 2);
        assert_eq!(mirror_index(5, 5), 3);
        assert_eq!(mirror_index(6, 5), 2);
    }
}
