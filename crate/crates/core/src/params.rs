//! Uniform access to named parameter tensors.
//!
//! Every trainable parameter struct exposes its tensors through [`ParamSet`];
//! the optimizer, checkpoint writer and gradient checker all operate on that
//! surface instead of knowing field layouts.

use std::collections::BTreeMap;

pub trait ParamSet {
    /// Visit each tensor as (name, shape, data), in a fixed canonical order.
    #[allow(clippy::type_complexity)]
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Mutable variant of [`ParamSet::visit`], same order.
    #[allow(clippy::type_complexity)]
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// Concatenate all tensors into one flat vector (canonical order).
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, _, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Tensors keyed by name, for order-independent lookups.
    fn to_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut map = BTreeMap::new();
        self.visit(&mut |name, shape, data| {
            map.insert(name.to_string(), (shape.to_vec(), data.to_vec()));
        });
        map
    }
}
