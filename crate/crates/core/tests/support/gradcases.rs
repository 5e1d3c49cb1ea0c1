// Random single-variant networks for gradient checking. Parameterless layers
// sit behind a linear conv or dense layer so their backward pass shows up in
// that layer's parameter gradients.

use lesion_core::nn::{
    Activation, BlockSpec, InputSpec, LayerSpec, NetworkSpec, Padding, ParamStore, Rng, Tensor,
};

pub struct Case {
    pub net: NetworkSpec,
    pub params: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
}

fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn random_params(net: &NetworkSpec, rng: &mut Rng) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, shape) in net.param_shapes() {
        p.insert(name, random_tensor(rng, &shape));
    }
    p
}

fn linear_conv(filters: usize) -> LayerSpec {
    LayerSpec::Conv2D {
        filters,
        kernel: (3, 3),
        stride: 1,
        padding: Padding::Same,
        activation: Activation::None,
    }
}

fn single(shape: &[usize], layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec::new(vec![InputSpec::new("x", shape)], vec![BlockSpec::new("b", layers)]).unwrap()
}

fn image_shape(rng: &mut Rng, min: usize) -> Vec<usize> {
    vec![range(rng, min, min + 4), range(rng, min, min + 4), range(rng, 1, 3)]
}

/// Variant names: `conv-relu`, `conv-sigmoid`, `conv-none`, `dense-*`,
/// `maxpool`, `gap`, `flatten`, `dropout`, `concat`.
pub fn variants() -> Vec<String> {
    let mut v = Vec::new();
    for a in ["relu", "sigmoid", "none"] {
        v.push(format!("conv-{a}"));
        v.push(format!("dense-{a}"));
    }
    for s in ["maxpool", "gap", "flatten", "dropout", "concat"] {
        v.push(s.to_string());
    }
    v
}

pub fn build(variant: &str, rng: &mut Rng) -> Case {
    let act = |name: &str| match name {
        "relu" => Activation::Relu,
        "sigmoid" => Activation::Sigmoid,
        _ => Activation::None,
    };
    let (net, inputs) = match variant.split_once('-') {
        Some(("conv", a)) => {
            let shape = image_shape(rng, 3);
            let k = (range(rng, 1, 3), range(rng, 1, 3));
            let padding = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
            let layer = LayerSpec::Conv2D {
                filters: range(rng, 1, 4),
                kernel: k,
                stride: range(rng, 1, 2),
                padding,
                activation: act(a),
            };
            let x = random_tensor(rng, &shape);
            (single(&shape, vec![layer]), vec![x])
        }
        Some(("dense", a)) => {
            let shape = vec![range(rng, 1, 12)];
            let layer = LayerSpec::Dense { units: range(rng, 1, 6), activation: act(a) };
            let x = random_tensor(rng, &shape);
            (single(&shape, vec![layer]), vec![x])
        }
        _ => match variant {
            "maxpool" => {
                let shape = image_shape(rng, 4);
                let window = range(rng, 2, 3);
                let layers = vec![
                    linear_conv(range(rng, 1, 3)),
                    LayerSpec::MaxPool2D { window, stride: range(rng, 1, window) },
                ];
                let x = random_tensor(rng, &shape);
                (single(&shape, layers), vec![x])
            }
            "gap" | "flatten" => {
                let shape = image_shape(rng, 2);
                let tail = if variant == "gap" { LayerSpec::GlobalAvgPool2D } else { LayerSpec::Flatten };
                let layers = vec![
                    linear_conv(range(rng, 1, 3)),
                    tail,
                    LayerSpec::Dense { units: range(rng, 1, 3), activation: Activation::None },
                ];
                let x = random_tensor(rng, &shape);
                (single(&shape, layers), vec![x])
            }
            "dropout" => {
                let shape = vec![range(rng, 2, 10)];
                let layers = vec![
                    LayerSpec::Dense { units: range(rng, 4, 12), activation: Activation::None },
                    LayerSpec::Dropout { rate: rng.uniform(0.1, 0.7) },
                    LayerSpec::Dense { units: range(rng, 1, 3), activation: Activation::None },
                ];
                let x = random_tensor(rng, &shape);
                (single(&shape, layers), vec![x])
            }
            "concat" => {
                let a_shape = vec![range(rng, 1, 6)];
                let b_shape = image_shape(rng, 2);
                let net = NetworkSpec::new(
                    vec![InputSpec::new("a", &a_shape), InputSpec::new("b", &b_shape)],
                    vec![
                        BlockSpec::new(
                            "left",
                            vec![LayerSpec::Dense { units: range(rng, 1, 4), activation: Activation::None }],
                        )
                        .with_sources(["a"]),
                        BlockSpec::new("right", vec![linear_conv(range(rng, 1, 2))]).with_sources(["b"]),
                        BlockSpec::new(
                            "join",
                            vec![
                                LayerSpec::Concat,
                                LayerSpec::Dense { units: range(rng, 1, 3), activation: Activation::None },
                            ],
                        )
                        .with_sources(["left", "right"]),
                    ],
                )
                .unwrap();
                let xs = vec![random_tensor(rng, &a_shape), random_tensor(rng, &b_shape)];
                (net, xs)
            }
            other => panic!("unknown variant {other}"),
        },
    };
    let params = random_params(&net, rng);
    Case { net, params, inputs }
}
