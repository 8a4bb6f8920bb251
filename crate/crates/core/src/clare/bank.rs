use super::{Adapter, Discriminator};
use crate::params::{ParamId, ParamStore};
use crate::policy::LayerSite;
use crate::{Error, Result};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Adapter selected for an input, and the discriminator that selected it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub adapter: usize,
    pub discriminator: usize,
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_oldest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.map(|(j, _)| j)
}

/// Adapters, discriminators and the linking map of one expandable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBank {
    /// Position in the model's list of expandable layers.
    pub layer: usize,
    pub site: LayerSite,
    pub dim: usize,
    pub adapters: Vec<Adapter>,
    pub discriminators: Vec<Discriminator>,
    /// `links[j]` is the adapter serving discriminator `j`.
    pub links: Vec<usize>,
}

impl LayerBank {
    pub fn new(layer: usize, site: LayerSite, dim: usize) -> Self {
        LayerBank {
            layer,
            site,
            dim,
            adapters: Vec::new(),
            discriminators: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.discriminators.is_empty()
    }

    pub fn num_adapters(&self) -> usize {
        self.adapters.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.adapters
            .iter()
            .flat_map(|a| a.params())
            .chain(self.discriminators.iter().flat_map(|d| d.params()))
            .collect()
    }

    /// Reconstruction error of every discriminator on `x`.
    pub fn errors(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.discriminators
            .iter()
            .map(|d| d.recon_error(store, x))
            .collect()
    }

    /// True once some discriminator has finalized statistics. Only those
    /// take part in routing; a discriminator still in training would
    /// otherwise capture inputs with its untrained reconstruction.
    pub fn is_routable(&self) -> bool {
        self.discriminators.iter().any(|d| d.stats.is_some())
    }

    fn select(&self, errors: &[f64]) -> Result<Route> {
        let mut best: Option<(usize, f64)> = None;
        for (j, (&e, d)) in errors.iter().zip(&self.discriminators).enumerate() {
            if d.stats.is_none() {
                continue;
            }
            if !e.is_finite() {
                return Err(Error::non_finite("discriminator reconstruction error"));
            }
            if best.map_or(true, |(_, b)| e < b) {
                best = Some((j, e));
            }
        }
        let (j, _) = best.ok_or(Error::EmptyBank { layer: self.layer })?;
        Ok(Route {
            adapter: self.links[j],
            discriminator: j,
        })
    }

    /// Adapter linked to the discriminator with the smallest error on `x`.
    pub fn route(&self, store: &ParamStore, x: &[f64]) -> Result<Route> {
        if !self.is_routable() {
            return Err(Error::EmptyBank { layer: self.layer });
        }
        let e = self.errors(store, x)?;
        self.select(&e)
    }

    /// One routing decision for a group of vectors: errors are averaged over
    /// the group per discriminator before taking the argmin.
    pub fn token_route(&self, store: &ParamStore, xs: &[&[f64]]) -> Result<Route> {
        if xs.is_empty() {
            return Err(Error::Empty { what: "token list" });
        }
        if !self.is_routable() {
            return Err(Error::EmptyBank { layer: self.layer });
        }
        let mut mean = alloc::vec![0.0; self.discriminators.len()];
        for x in xs {
            for (m, e) in mean.iter_mut().zip(self.errors(store, x)?) {
                *m += e;
            }
        }
        for m in &mut mean {
            *m /= xs.len() as f64;
        }
        self.select(&mean)
    }

    /// Checks the structural invariants expected after `stage` stages.
    pub fn check_invariants(&self, stage: usize) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(alloc::format!("layer {}: {msg}", self.layer)));
        if self.discriminators.len() != stage {
            return fail("discriminator count differs from stage");
        }
        if self.links.len() != self.discriminators.len() {
            return fail("linking map not total");
        }
        if self.adapters.len() > stage || (stage > 0 && self.adapters.is_empty()) {
            return fail("adapter count out of bounds");
        }
        if self.links.iter().any(|&a| a >= self.adapters.len()) {
            return fail("link to missing adapter");
        }
        if (0..self.adapters.len()).any(|a| !self.links.contains(&a)) {
            return fail("linking map not surjective");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn argmin_picks_smallest_and_oldest_on_ties() {
        assert_eq!(argmin_oldest(&[0.9, 0.1, 0.5]), Some(1));
        assert_eq!(argmin_oldest(&[0.3, 0.3]), Some(0));
        assert_eq!(argmin_oldest(&[]), None);
    }

    #[test]
    fn empty_bank_cannot_route() {
        let bank = LayerBank::new(2, LayerSite::Encoder(0), 4);
        let store = ParamStore::new();
        assert_eq!(bank.route(&store, &[0.0; 4]), Err(Error::EmptyBank { layer: 2 }));
    }

    /// Bank whose discriminators are zero autoencoders scaled so that the
    /// error of discriminator `j` on any x is exactly ‖x‖ (all tie).
    fn zero_bank(n: usize, links: &[usize], adapters: usize) -> (ParamStore, LayerBank) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(0);
        let mut bank = LayerBank::new(0, LayerSite::Encoder(0), 2);
        for i in 0..adapters {
            bank.adapters.push(Adapter::create(&mut store, 0, i, 2, 1, i + 1, 0.02, &mut rng));
        }
        for j in 0..n {
            let mut d = Discriminator::create(&mut store, 0, j, 2, 1, j + 1, &mut rng);
            d.stats = Some(crate::clare::ErrorStats { mean: 1.0, std: 1.0 });
            store.get_mut(d.enc).data_mut().fill(0.0);
            store.get_mut(d.dec).data_mut().fill(0.0);
            bank.discriminators.push(d);
        }
        bank.links = links.to_vec();
        (store, bank)
    }

    #[test]
    fn unfinalized_discriminators_do_not_route() {
        let (store, mut bank) = zero_bank(2, &[0, 1], 2);
        bank.discriminators[0].stats = None;
        assert_eq!(bank.route(&store, &[1.0, 1.0]).unwrap().adapter, 1);
        bank.discriminators[1].stats = None;
        assert!(!bank.is_routable());
        assert_eq!(bank.route(&store, &[1.0, 1.0]), Err(Error::EmptyBank { layer: 0 }));
    }

    #[test]
    fn tie_routes_to_oldest() {
        let (store, bank) = zero_bank(3, &[0, 1, 1], 2);
        let r = bank.route(&store, &[1.0, 1.0]).unwrap();
        assert_eq!(r, Route { adapter: 0, discriminator: 0 });
    }

    #[test]
    fn invariants_detect_non_surjective_links() {
        let (_, bank) = zero_bank(2, &[0, 0], 2);
        assert!(bank.check_invariants(2).is_err());
        let (_, bank) = zero_bank(2, &[0, 1], 2);
        assert!(bank.check_invariants(2).is_ok());
        assert!(bank.check_invariants(3).is_err());
    }

    #[test]
    fn token_route_rejects_empty_list() {
        let (store, bank) = zero_bank(1, &[0], 1);
        assert_eq!(bank.token_route(&store, &[]), Err(Error::Empty { what: "token list" }));
    }
}
