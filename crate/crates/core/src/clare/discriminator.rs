use crate::autodiff::Var;
use crate::math::{dot, sqrt};
use crate::params::{ParamId, ParamStore, Session};
use crate::{Error, Result, Rng};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Frozen mean and standard deviation of a discriminator's reconstruction
/// error over the data it was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
}

/// Autoencoder over a layer's input features, `W_dec · ReLU(W_enc · x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    /// `[rank, dim]`
    pub enc: ParamId,
    /// `[dim, rank]`
    pub dec: ParamId,
    pub dim: usize,
    pub rank: usize,
    /// Stage at which the discriminator was created.
    pub stage: usize,
    pub stats: Option<ErrorStats>,
}

impl Discriminator {
    pub fn create(
        store: &mut ParamStore,
        layer: usize,
        index: usize,
        dim: usize,
        rank: usize,
        stage: usize,
        rng: &mut Rng,
    ) -> Self {
        let enc = store.add_normal(
            format!("bank{layer}.disc{index}.enc"),
            &[rank, dim],
            sqrt(2.0 / dim as f64),
            rng,
        );
        let dec = store.add_normal(
            format!("bank{layer}.disc{index}.dec"),
            &[dim, rank],
            sqrt(1.0 / rank as f64),
            rng,
        );
        Discriminator {
            enc,
            dec,
            dim,
            rank,
            stage,
            stats: None,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.enc, self.dec]
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim * self.rank
    }

    /// `‖x − D(x)‖₂` for one feature vector.
    pub fn recon_error(&self, store: &ParamStore, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::shape("recon_error", &[&[self.dim], &[x.len()]]));
        }
        let enc = store.get(self.enc).data();
        let dec = store.get(self.dec).data();
        let mut h = vec![0.0; self.rank];
        for (k, hk) in h.iter_mut().enumerate() {
            *hk = dot(&enc[k * self.dim..(k + 1) * self.dim], x).max(0.0);
        }
        let mut acc = 0.0;
        for i in 0..self.dim {
            let r = x[i] - dot(&dec[i * self.rank..(i + 1) * self.rank], &h);
            acc += r * r;
        }
        Ok(sqrt(acc))
    }

    /// Per-row reconstruction errors inside a session, `x[m, dim] -> [m]`.
    pub fn recon_errors(&self, s: &mut Session, x: Var) -> Result<Var> {
        let enc = s.param(self.enc);
        let dec = s.param(self.dec);
        let h = s.graph.matmul_nt(x, enc)?;
        let h = s.graph.relu(h);
        let y = s.graph.matmul_nt(h, dec)?;
        let r = s.graph.sub(x, y)?;
        s.graph.row_norm(r)
    }

    pub fn stats(&self, layer: usize, index: usize) -> Result<ErrorStats> {
        self.stats.ok_or(Error::StatsNotFinalized { layer, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(dim: usize, rank: usize, enc: &[f64], dec: &[f64]) -> (ParamStore, Discriminator) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(1);
        let d = Discriminator::create(&mut store, 0, 0, dim, rank, 1, &mut rng);
        store.get_mut(d.enc).data_mut().copy_from_slice(enc);
        store.get_mut(d.dec).data_mut().copy_from_slice(dec);
        (store, d)
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        // identity autoencoder on the positive orthant
        let (store, d) = disc(2, 2, &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.recon_error(&store, &[0.3, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_give_input_norm() {
        let (store, d) = disc(3, 2, &[0.0; 6], &[0.0; 6]);
        assert!((d.recon_error(&store, &[3.0, 4.0, 12.0]).unwrap() - 13.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_case() {
        // enc = [[1, 0, 1], [0, -1, 0]], dec = [[1, 0], [0, 1], [0.5, 0]]
        // x = [1, 2, -3]: enc x = [-2, -2] -> relu [0, 0] -> recon 0 -> e = ||x|| = sqrt(14)
        let (store, d) = disc(3, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.0]);
        assert!((d.recon_error(&store, &[1.0, 2.0, -3.0]).unwrap() - 14f64.sqrt()).abs() < 1e-12);
        // x = [2, -1, 1]: enc x = [3, 1] -> recon [3, 1, 1.5] -> residual [-1, -2, -0.5]
        let e = d.recon_error(&store, &[2.0, -1.0, 1.0]).unwrap();
        assert!((e - 5.25f64.sqrt()).abs() < 1e-12);
        // graph path agrees
        let mut s = Session::eval(&store);
        let x = s
            .graph
            .constant(crate::Tensor::matrix(2, 3, vec![1.0, 2.0, -3.0, 2.0, -1.0, 1.0]).unwrap());
        let es = d.recon_errors(&mut s, x).unwrap();
        let v = s.graph.value(es).data();
        assert!((v[0] - 14f64.sqrt()).abs() < 1e-12 && (v[1] - e).abs() < 1e-12);
    }

    #[test]
    fn stats_must_be_finalized() {
        let (_, d) = disc(1, 1, &[0.0], &[0.0]);
        assert!(matches!(d.stats(2, 3), Err(Error::StatsNotFinalized { layer: 2, index: 3 })));
    }
}
