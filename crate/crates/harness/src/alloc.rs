//! glibc hands large blocks straight to `mmap` and unmaps them on free, so
//! every training step page-faults its im2col buffers back in. Keeping
//! freed memory in the heap avoids that.

/// Serve all allocations from the heap and never trim it. No-op off glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables; called before any
    // threads are spawned.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
