use super::Real;

/// In-place min-max normalisation to `[0, 1]`. A constant patch becomes all
/// zeros.
pub fn minmax_normalize_in_place<T: Real>(patch: &mut [T]) {
    let Some(&first) = patch.first() else {
        return;
    };
    let (lo, hi) = patch.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range <= T::zero() {
        patch.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    for v in patch.iter_mut() {
        // the division can land a hair outside [0, 1] for extreme ranges
        *v = ((*v - lo) / range).max(T::zero()).min(T::one());
    }
}

pub fn minmax_normalize<T: Real>(patch: &super::Tensor<T>) -> super::Tensor<T> {
    let mut out = patch.clone();
    out.set_requires_grad(false);
    minmax_normalize_in_place(out.data_mut());
    out
}
