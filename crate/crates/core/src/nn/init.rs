use rand::Rng;

use super::{NetworkSpec, ParamVector, Scalar};

/// Uniform fan-in/fan-out initialisation, `±sqrt(6 / (fan_in + fan_out))`,
/// with zero biases.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> ParamVector<T> {
    let mut params = vec![T::zero(); spec.param_count()];
    for slot in spec.layout() {
        let (fan_in, fan_out) = slot.fan_in_out();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for p in &mut params[slot.weight_offset..slot.bias_offset] {
            *p = T::of(rng.random_range(-bound..bound));
        }
    }
    ParamVector(params)
}
