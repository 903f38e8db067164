use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with an optional binary prune mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// 1.0 keeps a coordinate, 0.0 prunes it. Same shape as `value`.
    pub mask: Option<Tensor>,
    /// Frozen parameters are skipped by the optimizer.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            mask: None,
            trainable: true,
        }
    }

    pub fn with_mask(mut self) -> Self {
        self.mask = Some(Tensor::ones(self.value.shape()));
        self
    }

    /// Zeroes every coordinate whose mask entry is 0.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &m) in self.value.data_mut().iter_mut().zip(mask.data()) {
                if m == 0.0 {
                    *w = 0.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Param) -> usize {
        self.params.push(param);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        Self::with_betas(learning_rate, weight_decay, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, weight_decay: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and weight decay nonnegative (got {learning_rate}, {weight_decay})"
            )));
        }
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) || !(epsilon > 0.0) {
            return Err(Error::Config("betas must lie in (0, 1) and epsilon be positive".into()));
        }
        Ok(Self {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            epsilon,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, param: usize) -> Option<&[f64]> {
        self.first_moment.get(param).map(Vec::as_slice)
    }

    pub fn second_moment(&self, param: usize) -> Option<&[f64]> {
        self.second_moment.get(param).map(Vec::as_slice)
    }
}

/// One AdamW update over every trainable parameter.
///
/// Coordinates whose prune mask is 0 are held at exactly 0 and their moment
/// estimates are reset, so a pruned weight never drifts back.
pub fn adamw_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters but {} were given",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.first_moment[i].len() != p.value.numel() {
            return Err(Error::Contract(format!("moment buffer shape mismatch for {}", p.name)));
        }
        if p.trainable && p.grad.is_none() {
            return Err(Error::Contract(format!("missing gradient for parameter {}", p.name)));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let (lr, wd, b1, b2, eps) = (
        state.learning_rate,
        state.weight_decay,
        state.beta1,
        state.beta2,
        state.epsilon,
    );

    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let mask = p.mask.as_ref().map(Tensor::data);
        let w = p.value.data_mut();
        for j in 0..w.len() {
            if mask.is_some_and(|mk| mk[j] == 0.0) {
                w[j] = 0.0;
                m[j] = 0.0;
                v[j] = 0.0;
                continue;
            }
            let g = grad[j];
            w[j] -= lr * wd * w[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
