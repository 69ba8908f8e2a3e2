use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, NetworkSpec, Plan, Source};

/// Which layers' mean activations enter the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// The ReLU following each convolution ahead of the classifier head.
    AllPostReluConvs,
    /// Every Concat output, plus post-ReLU convolutions outside any
    /// Concat block.
    ConcatPlusOuterConvs,
    /// `ConcatPlusOuterConvs` when the network has a Concat layer,
    /// `AllPostReluConvs` otherwise.
    Auto,
    Explicit(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub policy: SelectionPolicy,
    pub ids: Vec<String>,
    #[serde(skip)]
    pub(crate) indices: Vec<usize>,
}

impl LayerSelection {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Layers at or after the first Flatten / FullyConnected on any path.
fn classifier_head(spec: &NetworkSpec, plan: &Plan) -> Vec<bool> {
    let mut head = vec![false; spec.layers.len()];
    for (i, layer) in spec.layers.iter().enumerate() {
        let starts = matches!(
            layer.kind,
            LayerKind::Flatten | LayerKind::FullyConnected { .. }
        );
        let inherits = plan.sources[i]
            .iter()
            .any(|s| matches!(s, Source::Layer(j) if head[*j]));
        head[i] = starts || inherits;
    }
    head
}

fn is_post_relu_conv(spec: &NetworkSpec, plan: &Plan, i: usize) -> bool {
    matches!(spec.layers[i].kind, LayerKind::Relu)
        && matches!(plan.sources[i][0], Source::Layer(j) if matches!(spec.layers[j].kind, LayerKind::Conv2d { .. }))
}

/// Layers reachable from `from` (inclusive), following consumers.
fn reachable_from(plan: &Plan, from: usize) -> Vec<bool> {
    let mut seen = vec![false; plan.sources.len()];
    let mut stack = vec![from];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        stack.extend(plan.consumers[i].iter().copied());
    }
    seen
}

/// True when every path from the network input to `target` passes through
/// `via`.
fn dominates(plan: &Plan, via: usize, target: usize) -> bool {
    let n = plan.sources.len();
    let mut reached = vec![false; n];
    for i in 0..n {
        if i == via {
            continue;
        }
        reached[i] = plan.sources[i].iter().any(|s| match s {
            Source::Input => true,
            Source::Layer(j) => reached[*j],
        });
    }
    !reached[target]
}

pub fn select_layers(spec: &NetworkSpec, policy: &SelectionPolicy) -> Result<LayerSelection> {
    let plan = spec.plan()?;
    let head = classifier_head(spec, &plan);
    let n = spec.layers.len();
    let concats: Vec<usize> = (0..n)
        .filter(|&i| matches!(spec.layers[i].kind, LayerKind::Concat) && !head[i])
        .collect();
    let policy = match policy {
        SelectionPolicy::Auto if concats.is_empty() => SelectionPolicy::AllPostReluConvs,
        SelectionPolicy::Auto => SelectionPolicy::ConcatPlusOuterConvs,
        p => p.clone(),
    };

    let indices: Vec<usize> = match &policy {
        SelectionPolicy::AllPostReluConvs => (0..n)
            .filter(|&i| !head[i] && is_post_relu_conv(spec, &plan, i))
            .collect(),
        SelectionPolicy::ConcatPlusOuterConvs => (0..n)
            .filter(|&i| !head[i])
            .filter(|&i| {
                if matches!(spec.layers[i].kind, LayerKind::Concat) {
                    return true;
                }
                if !is_post_relu_conv(spec, &plan, i) {
                    return false;
                }
                let reach = reachable_from(&plan, i);
                concats.iter().all(|&c| !reach[c] || dominates(&plan, i, c))
            })
            .collect(),
        SelectionPolicy::Explicit(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let &i = plan
                    .index
                    .get(id.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("no layer named {id:?}")))?;
                if head[i] {
                    return Err(Error::InvalidArgument(format!(
                        "layer {id:?} belongs to the classifier head"
                    )));
                }
                out.push(i);
            }
            out
        }
        SelectionPolicy::Auto => unreachable!(),
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument(
            "network has no feature-extraction layer to attack".into(),
        ));
    }
    Ok(LayerSelection {
        policy,
        ids: indices.iter().map(|&i| spec.layers[i].id.clone()).collect(),
        indices,
    })
}
