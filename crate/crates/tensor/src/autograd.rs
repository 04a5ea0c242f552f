use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{with_grad_mode, Tensor};

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// Tensors that `output` does not depend on get an all-zero gradient. With
/// `create_graph` the returned gradients carry their own graph and can be
/// differentiated again.
pub fn grad<T: Scalar>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    if output.numel() != 1 {
        return Err(TensorError::Grad(format!(
            "grad needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    grad_with_seed(output, &Tensor::ones(output.shape()), wrt, create_graph)
}

/// Vector-Jacobian product: gradients of `<seed, output>` w.r.t. `wrt`.
pub fn grad_with_seed<T: Scalar>(
    output: &Tensor<T>,
    seed: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    if seed.shape() != output.shape() {
        return Err(TensorError::Grad(format!(
            "seed shape {:?} does not match output {:?}",
            seed.shape(),
            output.shape()
        )));
    }
    let targets: HashSet<usize> = wrt.iter().map(|t| t.id()).collect();
    let order = topo_order(output);

    let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
    grads.insert(output.id(), seed.clone());

    with_grad_mode(create_graph, || -> Result<()> {
        for node in order.iter().rev() {
            let Some(g) = grads.get(&node.id()).cloned() else {
                continue;
            };
            let Some(grad_fn) = node.grad_fn() else {
                continue;
            };
            if !targets.contains(&node.id()) {
                grads.remove(&node.id());
            }
            let input_grads = grad_fn.op.backward(&grad_fn.inputs, node, &g);
            for (input, ig) in grad_fn.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if ig.shape() != input.shape() {
                    return Err(TensorError::Grad(format!(
                        "{} produced gradient of shape {:?} for input {:?}",
                        grad_fn.op.name(),
                        ig.shape(),
                        input.shape()
                    )));
                }
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), acc);
            }
        }
        Ok(())
    })?;

    Ok(wrt
        .iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Nodes reachable from `root` through grad-requiring edges, inputs before users.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited = HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(gf) = node.grad_fn() {
            for input in &gf.inputs {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
