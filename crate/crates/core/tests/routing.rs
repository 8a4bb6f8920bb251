use clare_core::clare::{argmin_oldest, finalize_stats, Adapter, Discriminator, LayerBank};
use clare_core::optim::Adam;
use clare_core::params::{ParamStore, Session, TrainMask};
use clare_core::policy::LayerSite;
use clare_core::{Rng, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn argmin_ignores_common_shift(v in prop::collection::vec(0.0f64..10.0, 1..8), c in -5.0f64..5.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert_eq!(argmin_oldest(&v), argmin_oldest(&shifted));
        let j = argmin_oldest(&v).unwrap();
        prop_assert!(v.iter().all(|&x| x >= v[j]));
        prop_assert!(v[..j].iter().all(|&x| x > v[j]));
    }
}

#[test]
fn ties_go_to_oldest() {
    assert_eq!(argmin_oldest(&[1.0, 0.5, 0.5, 2.0]), Some(1));
    assert_eq!(argmin_oldest(&[3.0, 3.0]), Some(0));
    assert_eq!(argmin_oldest(&[]), None);
}

fn cluster(rng: &mut Rng, center: &[f64], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| center.iter().map(|c| c + 0.3 * rng.normal()).collect())
        .collect()
}

fn fit(store: &mut ParamStore, d: &Discriminator, xs: &[Vec<f64>], rng: &mut Rng) {
    let ids = d.params();
    let mask: TrainMask = ids.iter().copied().collect();
    let mut adam = Adam::new();
    for _ in 0..400 {
        let rows: Vec<&[f64]> = (0..32).map(|_| xs[rng.below(xs.len())].as_slice()).collect();
        let grads = {
            let mut s = Session::train(store, &mask);
            let x = s.graph.constant(Tensor::from_rows(&rows).unwrap());
            let e = d.recon_errors(&mut s, x).unwrap();
            let l = s.graph.mean(e);
            s.graph.backward(l).unwrap();
            s.grads()
        };
        adam.step(store, &ids, &grads, 5e-3).unwrap();
    }
}

#[test]
fn separable_clusters_route_to_their_own_adapter() {
    let dim = 8;
    let mut rng = Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let mut bank = LayerBank::new(0, LayerSite::Encoder(0), dim);
    let centers: [Vec<f64>; 2] = [
        (0..dim).map(|i| if i < 4 { 2.0 } else { 0.0 }).collect(),
        (0..dim).map(|i| if i >= 4 { 2.0 } else { 0.0 }).collect(),
    ];
    for (k, c) in centers.iter().enumerate() {
        let train = cluster(&mut rng, c, 300);
        bank.adapters.push(Adapter::create(&mut store, 0, k, dim, 2, k + 1, 0.02, &mut rng));
        let mut d = Discriminator::create(&mut store, 0, k, dim, 2, k + 1, &mut rng);
        fit(&mut store, &d, &train, &mut rng);
        let errs: Vec<f64> = train.iter().map(|x| d.recon_error(&store, x).unwrap()).collect();
        d.stats = Some(finalize_stats(&errs).unwrap());
        bank.discriminators.push(d);
        bank.links.push(k);
    }
    bank.check_invariants(2).unwrap();
    for (k, c) in centers.iter().enumerate() {
        let test = cluster(&mut rng, c, 200);
        let hits = test
            .iter()
            .filter(|x| bank.route(&store, x).unwrap().adapter == k)
            .count();
        assert!(hits as f64 / 200.0 >= 0.95, "cluster {k}: {hits}/200");
        let rows: Vec<&[f64]> = test.iter().map(|x| x.as_slice()).collect();
        assert_eq!(bank.token_route(&store, &rows).unwrap().adapter, k);
    }
}

#[test]
fn empty_bank_cannot_route() {
    let bank = LayerBank::new(0, LayerSite::Encoder(0), 4);
    assert!(bank.route(&ParamStore::new(), &[0.0; 4]).is_err());
}
