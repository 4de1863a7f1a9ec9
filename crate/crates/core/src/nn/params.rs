use super::tensor::Tensor2;

/// A model whose trainable state is a fixed, ordered list of named tensors.
///
/// The gradient of a model is a value of the same type, so the two lists
/// line up entry for entry.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor2)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)>;

    fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn global_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every tensor so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for (_, t) in self.params_mut() {
                t.scale(s);
            }
        }
        norm
    }

    fn add_assign_params(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let theirs = other.params();
        for ((_, mine), (_, t)) in self.params_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    fn scale_params(&mut self, s: f64) {
        for (_, t) in self.params_mut() {
            t.scale(s);
        }
    }
}

impl Parameterized for Vec<Tensor2> {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        self.iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        self.iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }
}

/// Pushes `(prefix.name, tensor)` entries; used by nested parameter structs.
pub(crate) fn push<'a>(
    out: &mut Vec<(String, &'a Tensor2)>,
    prefix: &str,
    name: &str,
    t: &'a Tensor2,
) {
    out.push((join(prefix, name), t));
}

pub(crate) fn push_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor2)>,
    prefix: &str,
    name: &str,
    t: &'a mut Tensor2,
) {
    out.push((join(prefix, name), t));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
