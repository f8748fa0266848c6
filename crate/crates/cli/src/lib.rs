// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment pipeline behind the `ffnprobe` binary.

pub mod pipeline;
pub mod spec;

/// Keeps glibc from returning large training buffers to the kernel after
/// every step. The per-step tensors are a few MiB each; without this the
/// allocator maps and unmaps them on every op, which roughly doubles
/// training time.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before
    // any worker threads exist.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
