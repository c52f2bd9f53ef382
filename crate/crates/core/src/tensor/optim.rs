use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores persisted moments, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::arg("adam moment buffers are misaligned"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// One bias-corrected Adam update of `params` by `grads`.
pub fn adam_step(params: &mut [Tensor<f32>], grads: &[&[f32]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::arg(format!(
            "adam: {} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::arg(format!(
            "adam state holds {} buffers for {} params",
            state.m.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != p.numel() {
            return Err(Error::shape(format!(
                "adam buffer {i}: param {:?}, grad len {}, moment len {}",
                p.shape(),
                g.len(),
                state.m[i].len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let (c1f, c2f) = ((1.0 - b1) as f32, (1.0 - b2) as f32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(*g).zip(m).zip(v) {
            *mi = b1f * *mi + c1f * gi;
            *vi = b2f * *vi + c2f * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *w -= (state.lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

/// Applies [`adam_step`] using each parameter's own gradient buffer.
pub fn adam_step_own_grads(params: &mut [Tensor<f32>], state: &mut AdamState) -> Result<()> {
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::arg(format!("parameter {:?} has no gradient", p.shape())))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(params, &refs, state)
}

/// Convenience wrapper holding a state for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            state: AdamState::new(lr),
        }
    }

    pub fn step(&mut self, store: &mut super::ParamStore<f32>) -> Result<()> {
        adam_step_own_grads(store.tensors_mut(), &mut self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(0.001);
        adam_step(&mut p, &[&[0.0, 0.0, 0.0]], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.0f32)];
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &[&[1.0]], &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].item() as f64 - expected).abs() < 1e-7);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn misaligned_buffers() {
        let mut p = vec![Tensor::scalar(0.0f32)];
        let mut st = AdamState::new(0.1);
        assert!(adam_step(&mut p, &[], &mut st).is_err());
        assert!(adam_step(&mut p, &[&[1.0, 2.0]], &mut st).is_err());
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![Tensor::new(&[2], vec![0.3f32, -0.7]).unwrap()];
            let mut st = AdamState::new(0.01);
            for k in 0..50 {
                let g = [(k as f32 * 0.1).sin(), (k as f32 * 0.3).cos()];
                adam_step(&mut p, &[&g], &mut st).unwrap();
            }
            p[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
