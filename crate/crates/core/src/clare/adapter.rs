use crate::autodiff::Var;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Error, Result, Rng};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Bottleneck side branch `W_up · ReLU(W_down · x)`.
///
/// `W_up` starts at zero, so a freshly created adapter contributes nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `[rank, dim]`
    pub down: ParamId,
    /// `[dim, rank]`
    pub up: ParamId,
    pub dim: usize,
    pub rank: usize,
    /// Stage at which the adapter was created.
    pub stage: usize,
}

impl Adapter {
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        store: &mut ParamStore,
        layer: usize,
        index: usize,
        dim: usize,
        rank: usize,
        stage: usize,
        down_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let down = store.add_normal(format!("bank{layer}.adapter{index}.down"), &[rank, dim], down_std, rng);
        let up = store.add(format!("bank{layer}.adapter{index}.up"), Tensor::zeros(&[dim, rank]));
        Adapter {
            down,
            up,
            dim,
            rank,
            stage,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.down, self.up]
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim * self.rank
    }

    /// Batched forward on `x[m, dim]` inside a session.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let down = s.param(self.down);
        let up = s.param(self.up);
        let h = s.graph.matmul_nt(x, down)?;
        let h = s.graph.relu(h);
        s.graph.matmul_nt(h, up)
    }

    /// Single-vector evaluation straight from the store.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape("adapter_forward", &[&[self.dim], &[x.len()]]));
        }
        let down = store.get(self.down).data();
        let up = store.get(self.up).data();
        let h: Vec<f64> = (0..self.rank)
            .map(|k| crate::math::dot(&down[k * self.dim..(k + 1) * self.dim], x).max(0.0))
            .collect();
        Ok((0..self.dim)
            .map(|i| crate::math::dot(&up[i * self.rank..(i + 1) * self.rank], &h))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }

    #[test]
    fn zero_init_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(0);
        let a = Adapter::create(&mut store, 0, 0, 8, 3, 1, 0.02, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert!(a.apply(&store, &x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn truncated_identity_kills_negative_inputs() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(0);
        let a = Adapter::create(&mut store, 0, 0, 3, 2, 1, 0.02, &mut rng);
        set(&mut store, a.down, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        set(&mut store, a.up, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(a.apply(&store, &[-1.0, -2.0, -0.5]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_computed_case() {
        // down = [[1, -1, 2], [0.5, 0.5, 0]], up = [[1, 0], [-1, 2], [0.5, 0.5]]
        // x = [1, 2, 3]: down x = [1 - 2 + 6, 0.5 + 1] = [5, 1.5]; relu same
        // up h = [5, -5 + 3, 2.5 + 0.75] = [5, -2, 3.25]
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(0);
        let a = Adapter::create(&mut store, 0, 0, 3, 2, 1, 0.02, &mut rng);
        set(&mut store, a.down, &[1.0, -1.0, 2.0, 0.5, 0.5, 0.0]);
        set(&mut store, a.up, &[1.0, 0.0, -1.0, 2.0, 0.5, 0.5]);
        assert_eq!(a.apply(&store, &[1.0, 2.0, 3.0]).unwrap(), vec![5.0, -2.0, 3.25]);
        // the batched graph path agrees
        let mut s = Session::eval(&store);
        let x = s.graph.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = a.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.value(y).data(), &[5.0, -2.0, 3.25]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(0);
        let a = Adapter::create(&mut store, 0, 0, 4, 2, 1, 0.02, &mut rng);
        assert!(matches!(a.apply(&store, &[1.0; 3]), Err(Error::Shape { .. })));
    }
}
