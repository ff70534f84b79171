use super::{GradVector, NnError, ParamVector, Scalar};

/// One SGD step with heavy-ball momentum:
/// `state <- momentum * state + grad`, `params <- params - lr * state`.
pub fn sgd_step<T: Scalar>(
    params: ParamVector<T>,
    grad: &GradVector<T>,
    lr: T,
    momentum: T,
    state: GradVector<T>,
) -> Result<(ParamVector<T>, GradVector<T>), NnError> {
    let mut params = params;
    let mut sgd = Sgd { lr, momentum, velocity: state };
    sgd.step(&mut params, grad)?;
    Ok((params, sgd.velocity))
}

/// In-place momentum SGD optimiser.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub velocity: GradVector<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(len: usize, lr: T, momentum: T) -> Self {
        Sgd { lr, momentum, velocity: GradVector::zeros(len) }
    }

    pub fn step(&mut self, params: &mut ParamVector<T>, grad: &GradVector<T>) -> Result<(), NnError> {
        if params.len() != grad.len() || params.len() != self.velocity.len() {
            return Err(NnError::LengthMismatch { what: "sgd operands", expected: params.len(), actual: grad.len() });
        }
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad.iter()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}
