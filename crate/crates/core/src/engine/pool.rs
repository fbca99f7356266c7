//! Bounded pool of outbound slots shared by remote policies and the broker
//! bridge. Callers beyond the cap block until a lease is released.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum PoolError {
    #[error("outbound pool is closed")]
    PoolClosed,
    #[error("timed out waiting for an outbound slot")]
    Timeout,
}

#[derive(Debug, Default)]
struct PoolState {
    inflight: usize,
    max_inflight: usize,
    acquired: u64,
    closed: bool,
}

#[derive(Debug)]
pub struct OutboundPool {
    cap: usize,
    state: Mutex<PoolState>,
    wake: Condvar,
}

/// Held while an outbound request is in flight; dropping it frees the slot.
#[derive(Debug)]
pub struct SlotLease {
    pool: Arc<OutboundPool>,
}

impl Drop for SlotLease {
    fn drop(&mut self) {
        let mut st = self.pool.state.lock().expect("pool lock");
        st.inflight -= 1;
        drop(st);
        self.pool.wake.notify_one();
    }
}

impl OutboundPool {
    pub fn new(cap: usize) -> Arc<Self> {
        assert!(cap >= 1, "pool capacity must be positive");
        Arc::new(OutboundPool {
            cap,
            state: Mutex::new(PoolState::default()),
            wake: Condvar::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn acquire(self: &Arc<Self>) -> Result<SlotLease, PoolError> {
        self.acquire_inner(None)
    }

    pub fn acquire_timeout(self: &Arc<Self>, wait: Duration) -> Result<SlotLease, PoolError> {
        self.acquire_inner(Some(Instant::now() + wait))
    }

    fn acquire_inner(self: &Arc<Self>, deadline: Option<Instant>) -> Result<SlotLease, PoolError> {
        let mut st = self.state.lock().expect("pool lock");
        loop {
            if st.closed {
                return Err(PoolError::PoolClosed);
            }
            if st.inflight < self.cap {
                st.inflight += 1;
                st.acquired += 1;
                st.max_inflight = st.max_inflight.max(st.inflight);
                return Ok(SlotLease { pool: Arc::clone(self) });
            }
            st = match deadline {
                None => self.wake.wait(st).expect("pool lock"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(PoolError::Timeout);
                    }
                    self.wake.wait_timeout(st, d - now).expect("pool lock").0
                }
            };
        }
    }

    /// Refuses new acquisitions and wakes every waiter with `PoolClosed`.
    /// Leases already handed out stay valid until dropped.
    pub fn close(&self) {
        self.state.lock().expect("pool lock").closed = true;
        self.wake.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("pool lock").closed
    }

    pub fn inflight(&self) -> usize {
        self.state.lock().expect("pool lock").inflight
    }

    /// Highest number of simultaneously held leases since creation.
    pub fn max_inflight_observed(&self) -> usize {
        self.state.lock().expect("pool lock").max_inflight
    }

    pub fn total_acquired(&self) -> u64 {
        self.state.lock().expect("pool lock").acquired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::thread;

    #[test]
    fn second_acquirer_waits_for_release() {
        let pool = OutboundPool::new(1);
        let first = pool.acquire().unwrap();
        let order = Arc::new(Mutex::new(Vec::new()));
        let (p2, o2) = (Arc::clone(&pool), Arc::clone(&order));
        let h = thread::spawn(move || {
            let _lease = p2.acquire().unwrap();
            o2.lock().unwrap().push("second");
        });
        thread::sleep(Duration::from_millis(50));
        order.lock().unwrap().push("release");
        drop(first);
        h.join().unwrap();
        assert_eq!(*order.lock().unwrap(), ["release", "second"]);
        assert_eq!(pool.max_inflight_observed(), 1);
    }

    #[test]
    fn acquire_after_close_fails() {
        let pool = OutboundPool::new(2);
        pool.close();
        assert_eq!(pool.acquire().unwrap_err(), PoolError::PoolClosed);
    }

    #[test]
    fn close_wakes_waiters() {
        let pool = OutboundPool::new(1);
        let _held = pool.acquire().unwrap();
        let p2 = Arc::clone(&pool);
        let h = thread::spawn(move || p2.acquire().map(|_| ()));
        thread::sleep(Duration::from_millis(30));
        pool.close();
        assert_eq!(h.join().unwrap(), Err(PoolError::PoolClosed));
    }

    #[test]
    fn timeout_when_saturated() {
        let pool = OutboundPool::new(1);
        let _held = pool.acquire().unwrap();
        assert_eq!(
            pool.acquire_timeout(Duration::from_millis(20)).unwrap_err(),
            PoolError::Timeout
        );
    }

    #[test]
    fn concurrent_load_respects_cap() {
        let pool = OutboundPool::new(8);
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        thread::scope(|s| {
            for _ in 0..64 {
                let (pool, live, peak) = (Arc::clone(&pool), Arc::clone(&live), Arc::clone(&peak));
                s.spawn(move || {
                    for _ in 0..20 {
                        let _lease = pool.acquire().unwrap();
                        let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        thread::yield_now();
                        live.fetch_sub(1, Ordering::SeqCst);
                    }
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 8);
        assert!(pool.max_inflight_observed() <= 8);
        assert_eq!(pool.total_acquired(), 64 * 20);
        assert_eq!(pool.inflight(), 0);
    }
}
