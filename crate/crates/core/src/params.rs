//! Uniform traversal over trainable tensors.
//!
//! Every model type walks its tensors in a fixed order. Gradients are stored in
//! a value of the same type, so flattening both yields aligned vectors.

pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    /// Names of each flattened coordinate's tensor.
    fn flat_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.extend(std::iter::repeat_n(name.to_string(), t.len())));
        out
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        });
        debug_assert_eq!(offset, values.len());
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v = 0.0));
    }

    /// `self -= lr * grads`, where `grads` has the same layout.
    fn sgd_step(&mut self, grads: &Self, lr: f64)
    where
        Self: Sized,
    {
        let g = grads.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            for (p, d) in t.iter_mut().zip(&g[offset..offset + n]) {
                *p -= lr * d;
            }
            offset += n;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}
