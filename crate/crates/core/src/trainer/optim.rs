use crate::nn::ParamStore;
use crate::tensor::Matrix;

use super::config::AdamWConfig;

/// Adaptive moments with decoupled weight decay. Moments are kept per
/// parameter block and created lazily on the first update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Option<Matrix>>,
    pub v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, blocks: usize) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![None; blocks],
            v: vec![None; blocks],
        }
    }

    /// Applies one update to every block with a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Matrix>], lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            let value = params.value_mut(id);
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, (p, &gk)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gk;
                vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Component;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.register("a", Component::Adapter, Matrix::from_rows(&[vec![1.0, -2.0]]));
        store.register("b", Component::Decoder, Matrix::from_rows(&[vec![5.0]]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, 2);
        let grads = vec![Some(Matrix::from_rows(&[vec![0.3, -4.0]])), None];
        opt.update(&mut store, &grads, 0.1);
        let a = store.blocks()[0].value.data().to_vec();
        assert!((a[0] - 0.9).abs() < 1e-6);
        assert!((a[1] + 1.9).abs() < 1e-6);
        assert_eq!(store.blocks()[1].value.data(), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.register("x", Component::Adapter, Matrix::from_rows(&[vec![3.0]]));
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        for _ in 0..2000 {
            let x = store.blocks()[0].value.item();
            opt.update(&mut store, &[Some(Matrix::scalar(2.0 * (x - 1.0)))], 0.01);
        }
        assert!((store.blocks()[0].value.item() - 1.0).abs() < 0.05);
    }
}
