use alloc::vec::Vec;

/// A collection of trainable parameter buffers.
///
/// The same type doubles as the gradient accumulator: `zeros_like` gives a
/// buffer set with identical layout whose slices pair up with the parameters.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `self += other`, buffer by buffer.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (d, s) in self.slices_mut().into_iter().zip(other.slices()) {
            super::add_into(d, s);
        }
    }
}

pub fn flatten<P: ParamSet + ?Sized>(p: &P) -> Vec<f64> {
    p.slices().concat()
}

/// Inverse of [`flatten`]. Panics on length mismatch.
pub fn unflatten_into<P: ParamSet + ?Sized>(p: &mut P, values: &[f64]) {
    let mut offset = 0;
    for s in p.slices_mut() {
        let n = s.len();
        s.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, values.len(), "unflatten_into: length mismatch");
}

impl<P: ParamSet> ParamSet for Vec<P> {
    fn slices(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|p| p.slices()).collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|p| p.slices_mut()).collect()
    }
}
