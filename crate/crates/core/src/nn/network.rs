use super::layers::{LayerCache, LayerGrads, LayerParams, LayerSpec};
use super::rng::Rng;
use super::tensor::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl InputSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        InputSpec {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }
}

/// A named, ordered run of layers with one trainable flag.
///
/// `sources` names the network inputs or earlier blocks feeding this one.
/// Empty means "the previous block", or the first input for the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub trainable: bool,
    pub sources: Vec<String>,
}

impl BlockSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        BlockSpec {
            name: name.into(),
            layers,
            trainable: true,
            sources: Vec::new(),
        }
    }

    pub fn with_sources<S: Into<String>>(mut self, sources: impl IntoIterator<Item = S>) -> Self {
        self.sources = sources.into_iter().map(Into::into).collect();
        self
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Input(usize),
    Block(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct BlockPlan {
    sources: Vec<Node>,
    /// Input shape of every layer, plus the block output shape at the end.
    shapes: Vec<Vec<usize>>,
}

/// Layer DAG organised as named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    inputs: Vec<InputSpec>,
    blocks: Vec<BlockSpec>,
    plan: Vec<BlockPlan>,
}

/// Activations and per-layer scratch kept by [`NetworkSpec::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    acts: Vec<Tensor<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

pub(crate) fn param_name(block: &str, layer: usize, suffix: &str) -> String {
    format!("{block}/{layer}/{suffix}")
}

impl NetworkSpec {
    pub fn new(inputs: Vec<InputSpec>, blocks: Vec<BlockSpec>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one input".into()));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one block".into()));
        }
        let mut plan: Vec<BlockPlan> = Vec::with_capacity(blocks.len());
        for (b, block) in blocks.iter().enumerate() {
            let clash = inputs.iter().any(|i| i.name == block.name)
                || blocks[..b].iter().any(|o| o.name == block.name);
            if block.name.is_empty() || block.name.contains('/') || clash {
                return Err(Error::InvalidArgument(format!(
                    "invalid or duplicate block name `{}`",
                    block.name
                )));
            }
            let sources = if block.sources.is_empty() {
                vec![if b == 0 { Node::Input(0) } else { Node::Block(b - 1) }]
            } else {
                block
                    .sources
                    .iter()
                    .map(|s| {
                        if let Some(i) = inputs.iter().position(|inp| &inp.name == s) {
                            Ok(Node::Input(i))
                        } else if let Some(j) = blocks[..b].iter().position(|o| &o.name == s) {
                            Ok(Node::Block(j))
                        } else {
                            Err(Error::InvalidArgument(format!(
                                "block `{}` reads unknown or later source `{s}`",
                                block.name
                            )))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let source_shape = |n: &Node| -> Vec<usize> {
                match *n {
                    Node::Input(i) => inputs[i].shape.clone(),
                    Node::Block(j) => plan[j].shapes.last().cloned().unwrap_or_default(),
                }
            };
            let opens_with_concat = matches!(block.layers.first(), Some(LayerSpec::Concat));
            let mut shape = if opens_with_concat {
                vec![sources.iter().map(|n| source_shape(n).iter().product::<usize>()).sum()]
            } else if sources.len() == 1 {
                source_shape(&sources[0])
            } else {
                return Err(Error::InvalidArgument(format!(
                    "block `{}` has {} sources but does not open with Concat",
                    block.name,
                    sources.len()
                )));
            };
            let mut shapes = vec![shape.clone()];
            for (l, layer) in block.layers.iter().enumerate() {
                layer.validate()?;
                if l > 0 && matches!(layer, LayerSpec::Concat) {
                    return Err(Error::InvalidArgument(format!(
                        "Concat must open block `{}`",
                        block.name
                    )));
                }
                shape = layer
                    .output_shape(&shape)
                    .map_err(|e| Error::Shape(format!("block `{}` layer {l}: {e}", block.name)))?;
                shapes.push(shape.clone());
            }
            plan.push(BlockPlan { sources, shapes });
        }
        Ok(NetworkSpec {
            inputs,
            blocks,
            plan,
        })
    }

    pub fn inputs(&self) -> &[InputSpec] {
        &self.inputs
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.plan.last().and_then(|p| p.shapes.last()).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn block_output_shape(&self, name: &str) -> Option<&[usize]> {
        let b = self.blocks.iter().position(|blk| blk.name == name)?;
        self.plan[b].shapes.last().map(Vec::as_slice)
    }

    pub fn set_trainable(&mut self, block: &str, trainable: bool) -> Result<()> {
        let blk = self
            .blocks
            .iter_mut()
            .find(|b| b.name == block)
            .ok_or_else(|| Error::InvalidArgument(format!("no block named `{block}`")))?;
        blk.trainable = trainable;
        Ok(())
    }

    pub fn trainable_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .map(|b| b.name.as_str())
            .collect()
    }

    /// Every parameter name with its shape, in block then layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (block, plan) in self.blocks.iter().zip(&self.plan) {
            for (l, layer) in block.layers.iter().enumerate() {
                for (suffix, shape) in layer.param_shapes(&plan.shapes[l]) {
                    out.push((param_name(&block.name, l, suffix), shape));
                }
            }
        }
        out
    }

    /// Parameter names of one block.
    pub fn block_param_names(&self, block: &str) -> Vec<String> {
        let prefix = format!("{block}/");
        self.param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with(&prefix))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Checks that `params` holds every declared parameter with the declared shape.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Missing(format!("parameter `{name}` not in store")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn layer_fans(&self) -> Vec<(String, usize, usize, Vec<(String, Vec<usize>)>)> {
        let mut out = Vec::new();
        for (block, plan) in self.blocks.iter().zip(&self.plan) {
            for (l, layer) in block.layers.iter().enumerate() {
                if let Some((fan_in, fan_out)) = layer.fans(&plan.shapes[l]) {
                    let shapes = layer
                        .param_shapes(&plan.shapes[l])
                        .into_iter()
                        .map(|(s, shape)| (param_name(&block.name, l, s), shape))
                        .collect();
                    out.push((block.name.clone(), fan_in, fan_out, shapes));
                }
            }
        }
        out
    }

    /// Block `b` needs a backward pass when it, or anything upstream, trains.
    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.blocks.len()];
        for b in 0..self.blocks.len() {
            req[b] = self.blocks[b].trainable
                || self.plan[b].sources.iter().any(|n| matches!(n, Node::Block(j) if req[*j]));
        }
        req
    }

    /// Zero gradient buffers for the parameters of trainable blocks only.
    pub fn zero_grads<T: Scalar>(&self) -> ParamStore<T> {
        let mut grads = ParamStore::new();
        for (block, plan) in self.blocks.iter().zip(&self.plan) {
            if !block.trainable {
                continue;
            }
            for (l, layer) in block.layers.iter().enumerate() {
                for (suffix, shape) in layer.param_shapes(&plan.shapes[l]) {
                    grads.insert(param_name(&block.name, l, suffix), Tensor::zeros(&shape));
                }
            }
        }
        grads
    }

    fn layer_params<'a, T: Scalar>(
        &self,
        params: &'a ParamStore<T>,
        block: &str,
        l: usize,
        layer: &LayerSpec,
    ) -> Result<Option<LayerParams<'a, T>>> {
        if !layer.has_params() {
            return Ok(None);
        }
        Ok(Some(LayerParams {
            kernel: params.require(&param_name(block, l, "kernel"))?,
            bias: params.require(&param_name(block, l, "bias"))?,
        }))
    }

    fn gather_input<T: Scalar>(
        &self,
        b: usize,
        inputs: &[Tensor<T>],
        caches: &[BlockCache<T>],
    ) -> Result<Tensor<T>> {
        let fetch = |n: &Node| -> &Tensor<T> {
            match *n {
                Node::Input(i) => &inputs[i],
                Node::Block(j) => caches[j].acts.last().expect("block output"),
            }
        };
        let sources = &self.plan[b].sources;
        if matches!(self.blocks[b].layers.first(), Some(LayerSpec::Concat)) {
            let mut joined = Vec::with_capacity(self.plan[b].shapes[0][0]);
            for n in sources {
                joined.extend_from_slice(fetch(n).data());
            }
            Ok(Tensor::vector(joined))
        } else {
            Ok(fetch(&sources[0]).clone())
        }
    }

    /// Evaluates the network; the returned cache feeds [`NetworkSpec::backward`].
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        inputs: &[Tensor<T>],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Shape(format!(
                "network takes {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        for (spec, x) in self.inputs.iter().zip(inputs) {
            if x.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "input `{}`: expected {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    x.shape()
                )));
            }
        }
        let mut caches: Vec<BlockCache<T>> = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let x = self.gather_input(b, inputs, &caches)?;
            let mut acts = Vec::with_capacity(block.layers.len() + 1);
            let mut layer_caches = Vec::with_capacity(block.layers.len());
            acts.push(x);
            for (l, layer) in block.layers.iter().enumerate() {
                let p = self.layer_params(params, &block.name, l, layer)?;
                let (y, c) = layer
                    .forward(acts.last().expect("layer input"), p, mode, rng)
                    .map_err(|e| match e {
                        Error::Shape(m) => Error::Shape(format!(
                            "block `{}` layer {l} ({}): {m}",
                            block.name,
                            layer.kind()
                        )),
                        other => other,
                    })?;
                acts.push(y);
                layer_caches.push(c);
            }
            caches.push(BlockCache {
                acts,
                layers: layer_caches,
            });
        }
        let out = caches
            .last()
            .and_then(|c| c.acts.last())
            .cloned()
            .expect("network output");
        Ok((out, ForwardCache { blocks: caches }))
    }

    /// Eval-mode output only.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut rng = Rng::new(0);
        Ok(self.forward(params, inputs, Mode::Eval, &mut rng)?.0)
    }

    /// Reverse pass from `grad_output` (d loss / d network output),
    /// accumulating into `grads`, which must hold a buffer for every
    /// parameter of every trainable block (see [`NetworkSpec::zero_grads`]).
    /// Frozen blocks receive no entries and are skipped entirely when nothing
    /// upstream of them trains.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &ForwardCache<T>,
        grad_output: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<()> {
        if cache.blocks.len() != self.blocks.len() {
            let missing = self
                .blocks
                .get(cache.blocks.len())
                .map_or("<extra>", |b| b.name.as_str());
            return Err(Error::Missing(format!("forward cache for block `{missing}`")));
        }
        if grad_output.shape() != self.output_shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                self.output_shape()
            )));
        }
        let req = self.requires_grad();
        let mut block_grads: Vec<Option<Tensor<T>>> = vec![None; self.blocks.len()];
        *block_grads.last_mut().expect("blocks") = Some(grad_output.clone());

        for b in (0..self.blocks.len()).rev() {
            if !req[b] {
                continue;
            }
            let Some(dy_out) = block_grads[b].take() else {
                continue;
            };
            let mut dy = Some(dy_out);
            let block = &self.blocks[b];
            let bc = &cache.blocks[b];
            let source_needs: Vec<bool> = self.plan[b]
                .sources
                .iter()
                .map(|n| matches!(n, Node::Block(j) if req[*j]))
                .collect();
            let feeds_upstream = source_needs.iter().any(|&s| s);
            for l in (0..block.layers.len()).rev() {
                let layer = &block.layers[l];
                let earlier_params =
                    block.trainable && block.layers[..l].iter().any(LayerSpec::has_params);
                let need_dx = earlier_params || feeds_upstream;
                let p = self.layer_params(params, &block.name, l, layer)?;
                let mut taken = None;
                if block.trainable && layer.has_params() {
                    let kn = param_name(&block.name, l, "kernel");
                    let bn = param_name(&block.name, l, "bias");
                    let gk = grads
                        .remove(&kn)
                        .ok_or_else(|| Error::Missing(format!("gradient buffer `{kn}`")))?;
                    let gb = grads
                        .remove(&bn)
                        .ok_or_else(|| Error::Missing(format!("gradient buffer `{bn}`")))?;
                    taken = Some((kn, gk, bn, gb));
                }
                let result = {
                    let layer_grads = taken.as_mut().map(|(_, gk, _, gb)| LayerGrads {
                        kernel: gk,
                        bias: gb,
                    });
                    let upstream = dy.take().expect("gradient flowing into layer");
                    layer.backward(&bc.acts[l], &bc.acts[l + 1], &bc.layers[l], upstream, p, layer_grads, need_dx)
                };
                if let Some((kn, gk, bn, gb)) = taken {
                    grads.insert(kn, gk);
                    grads.insert(bn, gb);
                }
                dy = result?;
                if dy.is_none() {
                    break;
                }
            }
            let Some(dy) = dy.filter(|_| feeds_upstream) else {
                continue;
            };
            // dy is now the gradient w.r.t. the block input.
            let sources = &self.plan[b].sources;
            let pieces: Vec<Tensor<T>> = if sources.len() == 1
                && !matches!(block.layers.first(), Some(LayerSpec::Concat))
            {
                vec![dy]
            } else {
                let mut offset = 0;
                let data = dy.data();
                sources
                    .iter()
                    .map(|n| {
                        let shape = match *n {
                            Node::Input(i) => self.inputs[i].shape.clone(),
                            Node::Block(j) => self.plan[j].shapes.last().cloned().unwrap_or_default(),
                        };
                        let len: usize = shape.iter().product();
                        let t = Tensor::new(shape, data[offset..offset + len].to_vec());
                        offset += len;
                        t
                    })
                    .collect::<Result<_>>()?
            };
            for ((n, piece), needed) in sources.iter().zip(pieces).zip(&source_needs) {
                let Node::Block(j) = *n else { continue };
                if !needed {
                    continue;
                }
                block_grads[j] = Some(match block_grads[j].take() {
                    None => piece,
                    Some(mut acc) => {
                        for (a, p) in acc.data_mut().iter_mut().zip(piece.data()) {
                            *a = *a + *p;
                        }
                        acc
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::layers::Activation;
    use super::*;

    fn linear_net() -> NetworkSpec {
        NetworkSpec::new(
            vec![InputSpec::new("x", &[1])],
            vec![BlockSpec::new("out", vec![LayerSpec::dense(1, Activation::None)])],
        )
        .unwrap()
    }

    #[test]
    fn linear_gradient_is_the_input() {
        let net = linear_net();
        let mut params = ParamStore::<f64>::new();
        params.insert("out/0/kernel", Tensor::new(vec![1, 1], vec![2.5]).unwrap());
        params.insert("out/0/bias", Tensor::vector(vec![0.0]));
        let x = Tensor::vector(vec![3.0]);
        let (y, cache) = net
            .forward(&params, std::slice::from_ref(&x), Mode::Eval, &mut Rng::new(0))
            .unwrap();
        assert_eq!(y.data(), &[7.5]);
        let mut grads = net.zero_grads();
        net.backward(&params, &cache, &Tensor::vector(vec![1.0]), &mut grads)
            .unwrap();
        assert_eq!(grads.get("out/0/kernel").unwrap().data(), &[3.0]);
        assert_eq!(grads.get("out/0/bias").unwrap().data(), &[1.0]);
    }

    #[test]
    fn frozen_blocks_get_no_gradient_entries() {
        let net = NetworkSpec::new(
            vec![InputSpec::new("x", &[2])],
            vec![
                BlockSpec::new("a", vec![LayerSpec::dense(3, Activation::Relu)]).frozen(),
                BlockSpec::new("b", vec![LayerSpec::dense(1, Activation::Sigmoid)]),
            ],
        )
        .unwrap();
        let grads = net.zero_grads::<f32>();
        let names: Vec<_> = grads.names().collect();
        assert_eq!(names, vec!["b/0/bias", "b/0/kernel"]);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let net = linear_net();
        let cache = ForwardCache::<f64> { blocks: Vec::new() };
        let mut grads = net.zero_grads();
        let params = ParamStore::new();
        let err = net
            .backward(&params, &cache, &Tensor::vector(vec![1.0]), &mut grads)
            .unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = NetworkSpec::new(
            vec![InputSpec::new("x", &[4, 4, 1])],
            vec![BlockSpec::new("head", vec![LayerSpec::dense(1, Activation::None)])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("block `head` layer 0"), "{err}");
    }

    #[test]
    fn multi_source_blocks_need_concat() {
        let err = NetworkSpec::new(
            vec![InputSpec::new("a", &[2]), InputSpec::new("b", &[3])],
            vec![BlockSpec::new("fuse", vec![LayerSpec::dense(1, Activation::None)])
                .with_sources(["a", "b"])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let ok = NetworkSpec::new(
            vec![InputSpec::new("a", &[2]), InputSpec::new("b", &[3])],
            vec![BlockSpec::new(
                "fuse",
                vec![LayerSpec::Concat, LayerSpec::dense(1, Activation::None)],
            )
            .with_sources(["a", "b"])],
        )
        .unwrap();
        assert_eq!(ok.param_shapes()[1].1, vec![5, 1]);
    }
}
