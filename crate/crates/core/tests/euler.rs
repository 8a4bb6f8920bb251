use clare_core::policy::euler_integrate;
use clare_core::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn constant_field_lands_exactly(a0 in prop::collection::vec(-5.0f64..5.0, 1..6), c in -3.0f64..3.0, k in 1usize..200) {
        let n = a0.len();
        let start = Tensor::vector(a0.clone());
        let field = Tensor::full(&[n], c);
        let out = euler_integrate(start, k, |_, _| Ok(field.clone())).unwrap();
        for (x, x0) in out.data().iter().zip(&a0) {
            prop_assert_eq!(*x, x0 + c);
        }
    }
}

#[test]
fn linear_field_approaches_exponential() {
    let a0 = vec![1.0, -0.5, 2.0];
    let out = euler_integrate(Tensor::vector(a0.clone()), 1000, |a, _| Ok(a.clone())).unwrap();
    for (x, x0) in out.data().iter().zip(&a0) {
        assert!((x - x0 * std::f64::consts::E).abs() < 1e-2, "{x} vs {}", x0 * std::f64::consts::E);
    }
}

#[test]
fn time_argument_steps_through_grid() {
    let mut seen = Vec::new();
    euler_integrate(Tensor::vector(vec![0.0]), 4, |a, s| {
        seen.push(s);
        Ok(a.clone())
    })
    .unwrap();
    assert_eq!(seen, vec![0.0, 0.25, 0.5, 0.75]);
}

#[test]
fn zero_steps_rejected() {
    assert!(euler_integrate(Tensor::vector(vec![0.0]), 0, |a, _| Ok(a.clone())).is_err());
}
