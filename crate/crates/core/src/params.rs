use crate::scalar::Scalar;

/// A container of trainable parameter buffers.
///
/// Gradients are stored in a container of the same type, so a gradient step
/// is a zip over `tensors_mut` of the parameters and `tensors` of the
/// gradients.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<(String, &[T])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])>;

    /// Number of scalars held, by direct enumeration of the buffers.
    fn enumerate_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Overwrites every buffer from a flat vector in `tensors` order.
    fn load_flat(&mut self, flat: &[T]) {
        let mut i = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[i..i + t.len()]);
            i += t.len();
        }
        assert_eq!(i, flat.len(), "flat parameter vector length mismatch");
    }

    /// `self -= lr * grads`.
    fn sgd_step(&mut self, grads: &Self, lr: T)
    where
        Self: Sized,
    {
        let g = grads.flatten();
        let mut i = 0;
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v -= lr * g[i];
                i += 1;
            }
        }
    }
}

/// Prefixes the names of a nested container's buffers.
pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a [T])>,
) -> impl Iterator<Item = (String, &'a [T])> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(name, t)| (format!("{prefix}.{name}"), t))
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut [T])>,
) -> impl Iterator<Item = (String, &'a mut [T])> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(name, t)| (format!("{prefix}.{name}"), t))
}
