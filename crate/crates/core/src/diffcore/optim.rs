use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Plain SGD update: `param -= lr * grad`, then zero the gradient.
pub fn sgd_step(params: &mut [&mut Tensor], learning_rate: f64) -> Result<()> {
    check_lr(learning_rate)?;
    for (i, p) in params.iter_mut().enumerate() {
        if p.grad().is_none() {
            return Err(Error::contract(format!(
                "sgd_step: parameter {i} (shape {:?}) has no gradient",
                p.shape()
            )));
        }
    }
    for p in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        p.data_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, g)| *w -= learning_rate * g);
        p.zero_grad();
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::contract(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. With `momentum == 0` each step is
/// bit-identical to [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, self.learning_rate);
        }
        check_lr(self.learning_rate)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::contract("optimizer reused with a different parameter set"));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p
                .grad()
                .ok_or_else(|| Error::contract("sgd step: parameter has no gradient"))?
                .to_vec();
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel + g;
                *w -= self.learning_rate * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}
