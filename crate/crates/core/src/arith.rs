//! Arithmetic modes for the vectorized kernels.
//!
//! `Strict` evaluates every 4-wide dot product with a fixed association and
//! accumulates the dots in a fixed order, so results are reproducible bit for
//! bit across runs, thread counts and granularities. `Relaxed` sets the
//! flush-to-zero / denormals-are-zero flags for the duration of a launch,
//! keeps one partial sum per lane (reduced once at the end of the window) and
//! uses fused multiply-add when the CPU has it.

use serde::{Deserialize, Serialize};

use crate::simd::F32x4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ArithMode {
    #[default]
    Strict,
    Relaxed,
}

impl ArithMode {
    pub fn name(self) -> &'static str {
        match self {
            ArithMode::Strict => "strict",
            ArithMode::Relaxed => "relaxed",
        }
    }
}

/// Accumulation policy for a window reduction.
pub(crate) trait Reduction: Send + Sync + 'static {
    type Acc: Copy + Send;

    fn zero() -> Self::Acc;
    fn step(acc: Self::Acc, input: F32x4, kernel: F32x4) -> Self::Acc;
    fn finish(acc: Self::Acc) -> f32;
}

/// `acc += dot4(input, kernel)` per step.
pub(crate) struct StrictDot;

impl Reduction for StrictDot {
    type Acc = f32;

    #[inline(always)]
    fn zero() -> f32 {
        0.0
    }

    #[inline(always)]
    fn step(acc: f32, input: F32x4, kernel: F32x4) -> f32 {
        acc + crate::simd::dot4(input, kernel)
    }

    #[inline(always)]
    fn finish(acc: f32) -> f32 {
        acc
    }
}

/// Lane-wise partial sums, unfused multiply then add.
pub(crate) struct RelaxedLanes;

impl Reduction for RelaxedLanes {
    type Acc = F32x4;

    #[inline(always)]
    fn zero() -> F32x4 {
        F32x4::zero()
    }

    #[inline(always)]
    fn step(acc: F32x4, input: F32x4, kernel: F32x4) -> F32x4 {
        acc.add(input.mul(kernel))
    }

    #[inline(always)]
    fn finish(acc: F32x4) -> f32 {
        acc.hsum()
    }
}

/// Lane-wise partial sums with fused multiply-add. Only instantiated inside
/// functions compiled with the `fma` target feature.
pub(crate) struct RelaxedFma;

impl Reduction for RelaxedFma {
    type Acc = F32x4;

    #[inline(always)]
    fn zero() -> F32x4 {
        F32x4::zero()
    }

    #[inline(always)]
    fn step(acc: F32x4, input: F32x4, kernel: F32x4) -> F32x4 {
        // SAFETY: RelaxedFma is only selected after runtime FMA detection.
        unsafe { input.mul_add_fused(kernel, acc) }
    }

    #[inline(always)]
    fn finish(acc: F32x4) -> f32 {
        acc.hsum()
    }
}

/// Sets flush-to-zero and denormals-are-zero on the current thread while
/// alive, restoring the previous control state on drop.
pub struct DenormalGuard {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
    #[cfg(target_arch = "aarch64")]
    saved: u64,
    // floating-point control state is per thread
    _not_send: std::marker::PhantomData<*const ()>,
}

#[cfg(target_arch = "x86_64")]
const MXCSR_FTZ_DAZ: u32 = 0x8040;

#[cfg(target_arch = "aarch64")]
const FPCR_FZ: u64 = 1 << 24;

impl DenormalGuard {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let mut saved: u32 = 0;
            // SAFETY: stmxcsr/ldmxcsr only touch the SSE control register.
            unsafe {
                std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
                let flushed = saved | MXCSR_FTZ_DAZ;
                std::arch::asm!("ldmxcsr [{}]", in(reg) &flushed, options(nostack));
            }
            DenormalGuard {
                saved,
                _not_send: std::marker::PhantomData,
            }
        }
        #[cfg(target_arch = "aarch64")]
        {
            let saved: u64;
            unsafe {
                std::arch::asm!("mrs {}, fpcr", out(reg) saved);
                std::arch::asm!("msr fpcr, {}", in(reg) saved | FPCR_FZ);
            }
            DenormalGuard {
                saved,
                _not_send: std::marker::PhantomData,
            }
        }
        #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
        {
            DenormalGuard {
                _not_send: std::marker::PhantomData,
            }
        }
    }
}

impl Default for DenormalGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for DenormalGuard {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack));
        }
        #[cfg(target_arch = "aarch64")]
        unsafe {
            std::arch::asm!("msr fpcr, {}", in(reg) self.saved);
        }
    }
}

/// Runs `f` with denormal flushing enabled when `mode` is relaxed.
#[inline]
pub fn with_mode<T>(mode: ArithMode, f: impl FnOnce() -> T) -> T {
    match mode {
        ArithMode::Strict => f(),
        ArithMode::Relaxed => {
            let _guard = DenormalGuard::new();
            f()
        }
    }
}
