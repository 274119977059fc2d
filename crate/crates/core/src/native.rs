//! Baseline monitor: a pthread mutex and condition variable embedded in each
//! object. Reentrancy is counted by the facade, so the mutex itself stays a
//! plain non-recursive one.

use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub(crate) struct NativeMonitor {
    mutex: UnsafeCell<libc::pthread_mutex_t>,
    cond: UnsafeCell<libc::pthread_cond_t>,
    // Flags of the current waiters, oldest first. Only touched with `mutex`
    // held; each flag lives on its waiter's stack for the duration of the
    // wait.
    waiters: UnsafeCell<VecDeque<*mut bool>>,
}

unsafe impl Send for NativeMonitor {}
unsafe impl Sync for NativeMonitor {}

impl NativeMonitor {
    pub(crate) const fn new() -> Self {
        Self {
            mutex: UnsafeCell::new(libc::PTHREAD_MUTEX_INITIALIZER),
            cond: UnsafeCell::new(libc::PTHREAD_COND_INITIALIZER),
            waiters: UnsafeCell::new(VecDeque::new()),
        }
    }

    pub(crate) fn lock(&self) {
        let rc = unsafe { libc::pthread_mutex_lock(self.mutex.get()) };
        debug_assert_eq!(rc, 0);
    }

    pub(crate) fn unlock(&self) {
        let rc = unsafe { libc::pthread_mutex_unlock(self.mutex.get()) };
        debug_assert_eq!(rc, 0);
    }

    /// Waits for a notification with the mutex held. Returns `true` if
    /// notified, `false` on timeout. The mutex is held again on return.
    pub(crate) fn wait(&self, deadline: Option<Instant>) -> bool {
        let mut notified = false;
        let me: *mut bool = &mut notified;
        unsafe {
            let waiters = self.waiters.get();
            (*waiters).push_back(me);
            loop {
                if *me {
                    return true;
                }
                match deadline {
                    None => {
                        libc::pthread_cond_wait(self.cond.get(), self.mutex.get());
                    }
                    Some(deadline) => {
                        let now = Instant::now();
                        if now >= deadline {
                            (*waiters).retain(|&w| w != me);
                            return false;
                        }
                        let ts = realtime_after(deadline - now);
                        libc::pthread_cond_timedwait(self.cond.get(), self.mutex.get(), &ts);
                    }
                }
            }
        }
    }

    /// Notifies the oldest waiter, or every waiter. Mutex must be held.
    pub(crate) fn notify(&self, all: bool) {
        unsafe {
            let waiters = &mut *self.waiters.get();
            if waiters.is_empty() {
                return;
            }
            let n = if all { waiters.len() } else { 1 };
            for w in waiters.drain(..n) {
                *w = true;
            }
            // The condition variable cannot target one thread; everyone
            // rechecks their own flag.
            libc::pthread_cond_broadcast(self.cond.get());
        }
    }
}

impl Drop for NativeMonitor {
    fn drop(&mut self) {
        unsafe {
            libc::pthread_cond_destroy(self.cond.get());
            libc::pthread_mutex_destroy(self.mutex.get());
        }
    }
}

fn realtime_after(d: Duration) -> libc::timespec {
    let abs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        + d;
    libc::timespec {
        tv_sec: abs.as_secs() as libc::time_t,
        tv_nsec: abs.subsec_nanos() as libc::c_long,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timed_wait_expires() {
        let m = NativeMonitor::new();
        m.lock();
        let start = Instant::now();
        assert!(!m.wait(Some(start + Duration::from_millis(20))));
        assert!(start.elapsed() >= Duration::from_millis(20));
        m.unlock();
    }

    #[test]
    fn late_waiter_cannot_steal_a_notification() {
        use std::sync::atomic::{AtomicBool, Ordering};
        let m = NativeMonitor::new();
        let waiting = AtomicBool::new(false);
        std::thread::scope(|s| {
            s.spawn(|| {
                m.lock();
                waiting.store(true, Ordering::SeqCst);
                assert!(m.wait(Some(Instant::now() + Duration::from_secs(10))));
                m.unlock();
            });
            while !waiting.load(Ordering::SeqCst) {
                std::thread::yield_now();
            }
            m.lock();
            m.notify(true);
            // Arrives after the notification: must time out.
            assert!(!m.wait(Some(Instant::now() + Duration::from_millis(5))));
            m.unlock();
        });
    }

    #[test]
    fn notify_without_waiters_is_dropped() {
        let m = NativeMonitor::new();
        m.lock();
        m.notify(false);
        assert!(!m.wait(Some(Instant::now() + Duration::from_millis(5))));
        m.unlock();
    }
}
