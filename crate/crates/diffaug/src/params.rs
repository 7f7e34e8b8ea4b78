//! Named access to parameter tensors.
//!
//! Every parameter container exposes its tensors through a visitor
//! with stable names. Binding onto a tape, pulling gradients back,
//! Adam bookkeeping, checkpoint manifests and gradient audits all key
//! off those names, so nothing depends on field iteration order
//! matching between separate code paths.

use std::collections::HashMap;

use ndauto::{NodeId, Tape, Tensor};

/// A container of named parameter tensors.
pub trait ParamContainer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Overwrites tensor data from a name → tensor map. Fails if a
    /// tensor is missing or has the wrong shape.
    fn load_from(&mut self, source: &HashMap<String, Tensor>) -> Result<(), String> {
        let mut err = None;
        self.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match source.get(name) {
                Some(src) if src.shape == t.shape => t.data = src.data.clone(),
                Some(src) => {
                    err = Some(format!(
                        "parameter {name}: shape {:?} does not match stored {:?}",
                        t.shape, src.shape
                    ))
                }
                None => err = Some(format!("parameter {name} missing from source")),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Leaf ids registered while binding containers onto a tape, used to
/// pull gradients back into the persistent tensors afterwards.
#[derive(Default)]
pub struct LeafSet {
    entries: Vec<(String, NodeId)>,
}

impl LeafSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: String, id: NodeId) {
        self.entries.push((name, id));
    }

    /// Collects gradients from the tape, keyed by leaf name.
    pub fn grads(&self, tape: &Tape) -> HashMap<String, Vec<f64>> {
        let mut out = HashMap::new();
        for (name, id) in &self.entries {
            if let Some(g) = tape.grad(*id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Leafs every tensor of `container` onto the tape under
/// `namespace.name`, recording the ids in `leafs`. Returns the name →
/// id map used to build typed bindings.
pub fn bind_container(
    tape: &mut Tape,
    container: &dyn ParamContainer,
    namespace: &str,
    trainable: bool,
    leafs: &mut LeafSet,
) -> HashMap<String, NodeId> {
    let mut map = HashMap::new();
    container.visit(&mut |name, t| {
        let id = tape.leaf_with(t, trainable && t.requires_grad);
        let full = format!("{namespace}.{name}");
        leafs.record(full, id);
        map.insert(name.to_string(), id);
    });
    map
}

/// Writes pulled gradients into the container's tensors (clearing any
/// tensor that received none). Gradient keys carry the namespace.
pub fn assign_grads(
    container: &mut dyn ParamContainer,
    namespace: &str,
    grads: &HashMap<String, Vec<f64>>,
) {
    container.visit_mut(&mut |name, t| {
        t.grad = grads.get(&format!("{namespace}.{name}")).cloned();
    });
}
