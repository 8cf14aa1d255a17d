//! Experiment driver: config files, and the `synth`, `train`, `eval`,
//! `sweep` and `gradcheck` commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

/// Keeps glibc from returning large buffers to the kernel after every
/// free. Training allocates and drops many tensors of a few hundred KB per
/// step, and the default mmap threshold turns each into fresh page faults.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
