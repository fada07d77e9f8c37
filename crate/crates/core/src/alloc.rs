//! Allocator tuning for the tape engine.

use std::sync::Once;

/// Stops glibc from serving every large tensor buffer with a fresh `mmap`
/// and returning it on free. Training and sampling allocate and drop
/// multi-megabyte buffers on every step, so the default thresholds turn
/// most of the run into page faults. Idempotent; a no-op off glibc.
pub fn retain_large_buffers() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
