use super::network::NetworkSpec;
use super::rng::Rng;
use super::tensor::{ParamStore, Scalar, Tensor};

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform kernels and zero biases. Kernels are drawn in block, layer
/// and row-major element order from `rng`.
pub fn init_params<T: Scalar>(net: &NetworkSpec, rng: &mut Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (_, fan_in, fan_out, shapes) in net.layer_fans() {
        let bound = glorot_bound(fan_in, fan_out);
        for (name, shape) in shapes {
            let tensor = if name.ends_with("/kernel") {
                let n: usize = shape.iter().product();
                let values = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
                Tensor::new(shape, values).expect("kernel shape")
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, tensor);
        }
    }
    store
}
