use evdiff::optim::{lbfgs_minimize, LbfgsConfig, Termination};
use proptest::prelude::*;

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
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
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

fn spd(n: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-1.0f64..1.0, n * n),
        prop::collection::vec(-2.0f64..2.0, n),
        prop::collection::vec(-2.0f64..2.0, n),
    )
        .prop_map(move |(m, b, x0)| {
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    a[i][j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>();
                }
                a[i][i] += 0.5;
            }
            (a, b, x0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratics_reach_the_linear_solve((a, b, x0) in (2usize..9).prop_flat_map(spd)) {
        let n = b.len();
        let f = |x: &[f64], g: &mut [f64]| {
            let mut value = 0.0;
            for i in 0..n {
                let ax: f64 = (0..n).map(|j| a[i][j] * x[j]).sum();
                g[i] = ax - b[i];
                value += 0.5 * x[i] * ax - b[i] * x[i];
            }
            value
        };
        let cfg = LbfgsConfig { max_iters: 500, grad_tol: 1e-10, ..LbfgsConfig::default() };
        let report = lbfgs_minimize(f, &x0, &cfg).unwrap();
        let exact = solve(a.clone(), b.clone());
        prop_assert_ne!(report.termination, Termination::MaxIterations);
        for (p, q) in report.x.iter().zip(&exact) {
            prop_assert!((p - q).abs() < 1e-7, "{:?} vs {:?}", report.x, exact);
        }
        prop_assert!(report.trace.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(report.trace.len(), report.iterations + 1);
    }

    #[test]
    fn traces_never_increase_on_nonsmooth_objectives(
        centre in prop::collection::vec(-3.0f64..3.0, 1..6),
        start in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let n = centre.len();
        let f = |x: &[f64], g: &mut [f64]| {
            let mut value = 0.0;
            for i in 0..n {
                let d = x[i] - centre[i];
                value += d.abs().max(0.0) + 0.1 * d * d;
                g[i] = d.signum() + 0.2 * d;
            }
            value
        };
        let report = lbfgs_minimize(f, &start[..n], &LbfgsConfig::default()).unwrap();
        prop_assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(report.value <= report.trace[0]);
    }
}
