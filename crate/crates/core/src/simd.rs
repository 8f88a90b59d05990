//! A minimal 4-lane `f32` vector, the CPU analogue of a `float4`.
//!
//! On x86_64 this wraps an SSE register (SSE2 is part of the baseline
//! target). Other targets use a plain array with the same lane semantics.

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::x86_64::*;

    #[derive(Clone, Copy, Debug)]
    #[repr(transparent)]
    pub struct F32x4(pub(super) __m128);

    impl F32x4 {
        #[inline(always)]
        pub fn zero() -> Self {
            // SAFETY: SSE is always available on x86_64.
            unsafe { F32x4(_mm_setzero_ps()) }
        }

        #[inline(always)]
        pub fn load(src: &[f32]) -> Self {
            assert!(src.len() >= 4);
            // SAFETY: bounds checked above; loadu has no alignment requirement.
            unsafe { F32x4(_mm_loadu_ps(src.as_ptr())) }
        }

        /// Loads four lanes starting at `offset` without a bounds check.
        ///
        /// # Safety
        /// `offset + 4 <= src.len()` must hold.
        #[inline(always)]
        pub unsafe fn load_at(src: &[f32], offset: usize) -> Self {
            debug_assert!(offset + 4 <= src.len());
            F32x4(_mm_loadu_ps(src.as_ptr().add(offset)))
        }

        #[inline(always)]
        pub fn store(self, dst: &mut [f32]) {
            assert!(dst.len() >= 4);
            // SAFETY: bounds checked above.
            unsafe { _mm_storeu_ps(dst.as_mut_ptr(), self.0) }
        }

        #[inline(always)]
        pub fn mul(self, rhs: Self) -> Self {
            unsafe { F32x4(_mm_mul_ps(self.0, rhs.0)) }
        }

        #[inline(always)]
        pub fn add(self, rhs: Self) -> Self {
            unsafe { F32x4(_mm_add_ps(self.0, rhs.0)) }
        }

        /// Lane-wise maximum. Lanes follow `maxps`: when either operand is
        /// NaN the second operand is returned.
        #[inline(always)]
        pub fn max(self, rhs: Self) -> Self {
            unsafe { F32x4(_mm_max_ps(self.0, rhs.0)) }
        }

        /// `(l0 + l1) + (l2 + l3)`
        #[inline(always)]
        pub fn hsum(self) -> f32 {
            unsafe {
                let swapped = _mm_shuffle_ps::<0b10_11_00_01>(self.0, self.0);
                let pairs = _mm_add_ps(self.0, swapped);
                let high = _mm_movehl_ps(pairs, pairs);
                _mm_cvtss_f32(_mm_add_ss(pairs, high))
            }
        }

        /// `self * a + b` rounded once per lane.
        ///
        /// # Safety
        /// The caller must run on a CPU with FMA and should itself be
        /// compiled with the `fma` target feature so this inlines.
        #[inline(always)]
        pub unsafe fn mul_add_fused(self, a: Self, b: Self) -> Self {
            F32x4(fused(self.0, a.0, b.0))
        }

        #[inline(always)]
        pub fn to_array(self) -> [f32; 4] {
            let mut out = [0.0; 4];
            self.store(&mut out);
            out
        }
    }

    #[inline]
    #[target_feature(enable = "fma")]
    unsafe fn fused(x: __m128, a: __m128, b: __m128) -> __m128 {
        _mm_fmadd_ps(x, a, b)
    }

    pub fn fma_available() -> bool {
        std::arch::is_x86_feature_detected!("fma")
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    #[derive(Clone, Copy, Debug)]
    pub struct F32x4(pub(super) [f32; 4]);

    impl F32x4 {
        #[inline(always)]
        pub fn zero() -> Self {
            F32x4([0.0; 4])
        }

        #[inline(always)]
        pub fn load(src: &[f32]) -> Self {
            F32x4([src[0], src[1], src[2], src[3]])
        }

        #[inline(always)]
        pub unsafe fn load_at(src: &[f32], offset: usize) -> Self {
            Self::load(&src[offset..offset + 4])
        }

        #[inline(always)]
        pub fn store(self, dst: &mut [f32]) {
            dst[..4].copy_from_slice(&self.0);
        }

        #[inline(always)]
        pub fn mul(self, rhs: Self) -> Self {
            F32x4(std::array::from_fn(|i| self.0[i] * rhs.0[i]))
        }

        #[inline(always)]
        pub fn add(self, rhs: Self) -> Self {
            F32x4(std::array::from_fn(|i| self.0[i] + rhs.0[i]))
        }

        #[inline(always)]
        pub fn max(self, rhs: Self) -> Self {
            F32x4(std::array::from_fn(|i| {
                if self.0[i] > rhs.0[i] {
                    self.0[i]
                } else {
                    rhs.0[i]
                }
            }))
        }

        #[inline(always)]
        pub fn hsum(self) -> f32 {
            (self.0[0] + self.0[1]) + (self.0[2] + self.0[3])
        }

        #[inline(always)]
        pub unsafe fn mul_add_fused(self, a: Self, b: Self) -> Self {
            F32x4(std::array::from_fn(|i| self.0[i].mul_add(a.0[i], b.0[i])))
        }

        #[inline(always)]
        pub fn to_array(self) -> [f32; 4] {
            self.0
        }
    }

    pub fn fma_available() -> bool {
        false
    }
}

pub use imp::{fma_available, F32x4};

/// Dot product of two 4-vectors with fixed association:
/// `(a0 b0 + a1 b1) + (a2 b2 + a3 b3)`.
#[inline(always)]
pub fn dot4(a: F32x4, b: F32x4) -> f32 {
    a.mul(b).hsum()
}

/// Scalar reference for [`dot4`], used by the oracles.
#[inline]
pub fn dot4_scalar(a: [f32; 4], b: [f32; 4]) -> f32 {
    (a[0] * b[0] + a[1] * b[1]) + (a[2] * b[2] + a[3] * b[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dot_of_ones_and_ramp() {
        let a = F32x4::load(&[1.0, 2.0, 3.0, 4.0]);
        let b = F32x4::load(&[1.0; 4]);
        assert_eq!(dot4(a, b), 10.0);
        assert_eq!(a.max(b).to_array(), [1.0, 2.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn vector_dot_matches_scalar_bits(a in prop::array::uniform4(-1e3f32..1e3),
                                          b in prop::array::uniform4(-1e3f32..1e3)) {
            let v = dot4(F32x4::load(&a), F32x4::load(&b));
            prop_assert_eq!(v.to_bits(), dot4_scalar(a, b).to_bits());
        }
    }
}
