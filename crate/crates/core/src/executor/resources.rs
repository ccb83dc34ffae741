//! Exclusive access to simulated chips.
//!
//! A [`ResourceManager`] owns a fixed set of chips created once. Leases hand
//! out whole chips; a chip has at most one holder, and dropping the lease
//! returns it. A process-wide manager is reachable through free functions.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, OnceLock};

use crate::chip::{ChipConfig, SynapseArray, ARRAYS_PER_CHIP};
use crate::error::{Error, Result};
use crate::graph::ArrayBinding;

#[derive(Debug)]
pub struct SimChip {
    index: usize,
    arrays: Vec<Mutex<SynapseArray>>,
}

impl SimChip {
    fn new(index: usize, cfg: &ChipConfig) -> Self {
        let arrays = (0..ARRAYS_PER_CHIP)
            .map(|a| Mutex::new(SynapseArray::new((index * ARRAYS_PER_CHIP + a) as u64, cfg)))
            .collect();
        SimChip { index, arrays }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn array(&self, a: usize) -> Option<&Mutex<SynapseArray>> {
        self.arrays.get(a)
    }
}

#[derive(Debug)]
struct Inner {
    cfg: ChipConfig,
    chips: Vec<Arc<SimChip>>,
    owned: Mutex<Vec<bool>>,
    freed: Condvar,
}

#[derive(Clone, Debug)]
pub struct ResourceManager {
    inner: Arc<Inner>,
}

impl ResourceManager {
    pub fn new(n_chips: usize, cfg: ChipConfig) -> Result<Self> {
        if n_chips == 0 {
            return Err(Error::InvalidConfig("at least one chip must be configured".into()));
        }
        cfg.validate()?;
        let chips = (0..n_chips).map(|i| Arc::new(SimChip::new(i, &cfg))).collect();
        Ok(ResourceManager {
            inner: Arc::new(Inner { cfg, chips, owned: Mutex::new(vec![false; n_chips]), freed: Condvar::new() }),
        })
    }

    pub fn n_chips(&self) -> usize {
        self.inner.chips.len()
    }

    pub fn config(&self) -> &ChipConfig {
        &self.inner.cfg
    }

    fn owned(&self) -> MutexGuard<'_, Vec<bool>> {
        self.inner.owned.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.n_chips() {
            return Err(Error::Unavailable { requested: n, available: self.n_chips() });
        }
        Ok(())
    }

    fn take(&self, owned: &mut [bool], n: usize) -> Option<ChipLease> {
        let free: Vec<usize> = (0..owned.len()).filter(|&i| !owned[i]).take(n).collect();
        if free.len() < n {
            return None;
        }
        for &i in &free {
            owned[i] = true;
        }
        Some(ChipLease { manager: self.clone(), chips: free.iter().map(|&i| self.inner.chips[i].clone()).collect() })
    }

    /// Blocks until `n` chips are free.
    pub fn acquire(&self, n: usize) -> Result<ChipLease> {
        self.check(n)?;
        let mut owned = self.owned();
        loop {
            if let Some(lease) = self.take(&mut owned, n) {
                return Ok(lease);
            }
            owned = self.inner.freed.wait(owned).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn try_acquire(&self, n: usize) -> Result<ChipLease> {
        self.check(n)?;
        let mut owned = self.owned();
        self.take(&mut owned, n).ok_or(Error::Busy)
    }

    pub fn free_chips(&self) -> usize {
        self.owned().iter().filter(|o| !**o).count()
    }
}

/// Exclusive handle on a set of chips. Bindings use lease-local chip
/// indices `0..n_chips()`.
#[derive(Debug)]
pub struct ChipLease {
    manager: ResourceManager,
    chips: Vec<Arc<SimChip>>,
}

impl ChipLease {
    pub fn n_chips(&self) -> usize {
        self.chips.len()
    }

    pub fn config(&self) -> &ChipConfig {
        self.manager.config()
    }

    /// Indices of the leased chips within their manager.
    pub fn chip_indices(&self) -> Vec<usize> {
        self.chips.iter().map(|c| c.index).collect()
    }

    pub fn arrays(&self) -> Vec<ArrayBinding> {
        (0..self.chips.len())
            .flat_map(|c| (0..ARRAYS_PER_CHIP).map(move |a| ArrayBinding::new(c, a)))
            .collect()
    }

    pub fn array(&self, b: ArrayBinding) -> Result<&Mutex<SynapseArray>> {
        self.chips
            .get(b.chip)
            .and_then(|c| c.array(b.array))
            .ok_or(Error::UnboundArray { chip: b.chip, array: b.array })
    }

    /// Manager-wide index of an array, the key of its fixed pattern.
    pub fn global_array_index(&self, b: ArrayBinding) -> Result<usize> {
        self.array(b)?;
        Ok(self.chips[b.chip].index * ARRAYS_PER_CHIP + b.array)
    }
}

impl Drop for ChipLease {
    fn drop(&mut self) {
        let mut owned = self.manager.owned();
        for c in &self.chips {
            owned[c.index] = false;
        }
        drop(owned);
        self.manager.inner.freed.notify_all();
    }
}

static GLOBAL: OnceLock<ResourceManager> = OnceLock::new();
static INIT_COUNT: AtomicUsize = AtomicUsize::new(0);

pub const DEFAULT_CHIPS: usize = 1;

/// Initializes the process-wide hardware once. Later calls return the
/// existing manager; they fail if they ask for a different setup.
pub fn init_hardware(n_chips: usize, cfg: ChipConfig) -> Result<&'static ResourceManager> {
    let mut err = None;
    let m = GLOBAL.get_or_init(|| {
        INIT_COUNT.fetch_add(1, Ordering::SeqCst);
        match ResourceManager::new(n_chips, cfg.clone()) {
            Ok(m) => m,
            Err(e) => {
                err = Some(e);
                ResourceManager::new(DEFAULT_CHIPS, ChipConfig::default()).expect("default hardware")
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if m.n_chips() != n_chips || m.config() != &cfg {
        return Err(Error::InvalidConfig(format!(
            "hardware already initialized with {} chip(s) and a different configuration",
            m.n_chips()
        )));
    }
    Ok(m)
}

/// The process-wide manager, initialized with defaults on first use.
pub fn hardware() -> &'static ResourceManager {
    GLOBAL.get_or_init(|| {
        INIT_COUNT.fetch_add(1, Ordering::SeqCst);
        ResourceManager::new(DEFAULT_CHIPS, ChipConfig::default()).expect("default hardware")
    })
}

pub fn hardware_init_count() -> usize {
    INIT_COUNT.load(Ordering::SeqCst)
}

pub fn acquire_chips(n: usize) -> Result<ChipLease> {
    hardware().acquire(n)
}
