use clare_core::eval::{metrics, SuccessMatrix};
use proptest::prelude::*;

fn oracle(r: &[Vec<f64>]) -> (f64, f64, f64) {
    let n = r.len();
    let mut auc = 0.0;
    for i in 0..n {
        let cells: Vec<f64> = (i..n).map(|m| r[i][m]).collect();
        auc += cells.iter().sum::<f64>() / cells.len() as f64;
    }
    let fwt: f64 = (0..n).map(|i| r[i][i]).sum::<f64>() / n as f64;
    let nbt = if n == 1 {
        0.0
    } else {
        let mut acc = 0.0;
        for i in 0..n - 1 {
            let drops: Vec<f64> = (i + 1..n).map(|m| r[i][i] - r[i][m]).collect();
            acc += drops.iter().sum::<f64>() / drops.len() as f64;
        }
        acc / (n - 1) as f64
    };
    (100.0 * auc / n as f64, 100.0 * fwt, 100.0 * nbt)
}

fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, n), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn agrees_with_direct_formulas(r in matrix_strategy()) {
        let n = r.len();
        let mut m = SuccessMatrix::new(n, 10);
        for i in 0..n {
            for k in i..n {
                m.set(i, k, r[i][k]).unwrap();
            }
        }
        let got = metrics(&m).unwrap();
        let (auc, fwt, nbt) = oracle(&r);
        prop_assert!((got.auc - auc).abs() < 1e-9);
        prop_assert!((got.fwt - fwt).abs() < 1e-9);
        prop_assert!((got.nbt - nbt).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&got.auc));
    }
}

#[test]
fn two_task_hand_case() {
    let mut m = SuccessMatrix::new(2, 10);
    m.set(0, 0, 1.0).unwrap();
    m.set(0, 1, 0.0).unwrap();
    m.set(1, 1, 1.0).unwrap();
    let got = metrics(&m).unwrap();
    assert!((got.auc - 75.0).abs() < 1e-12);
    assert!((got.fwt - 100.0).abs() < 1e-12);
    assert!((got.nbt - 100.0).abs() < 1e-12);
}

#[test]
fn single_task_has_no_backward_transfer() {
    let mut m = SuccessMatrix::new(1, 10);
    m.set(0, 0, 0.4).unwrap();
    let got = metrics(&m).unwrap();
    assert_eq!(got.nbt, 0.0);
    assert!((got.auc - 40.0).abs() < 1e-12);
}

#[test]
fn no_forgetting_means_zero_nbt() {
    let mut m = SuccessMatrix::new(3, 10);
    for i in 0..3 {
        for k in i..3 {
            m.set(i, k, 0.7).unwrap();
        }
    }
    assert!(metrics(&m).unwrap().nbt.abs() < 1e-12);
}

#[test]
fn incomplete_matrix_and_bad_cells_rejected() {
    let mut m = SuccessMatrix::new(2, 10);
    m.set(0, 0, 1.0).unwrap();
    assert!(metrics(&m).is_err());
    assert!(m.set(1, 0, 0.5).is_err());
    assert!(m.set(0, 1, 1.5).is_err());
    assert_eq!(m.filled(), 1);
}
