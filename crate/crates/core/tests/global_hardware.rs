//! Process-wide hardware initialization. Kept in its own binary so no other
//! test touches the global first.

use anamac::chip::ChipConfig;
use anamac::executor::{acquire_chips, hardware, hardware_init_count, init_hardware};

#[test]
fn init_is_idempotent_across_threads() {
    let cfg = ChipConfig { chip_seed: 7, ..ChipConfig::default() };
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let cfg = cfg.clone();
            std::thread::spawn(move || init_hardware(2, cfg).unwrap() as *const _ as usize)
        })
        .collect();
    let addrs: Vec<usize> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(addrs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(hardware_init_count(), 1);

    assert_eq!(hardware().n_chips(), 2);
    assert!(init_hardware(3, cfg.clone()).is_err());
    assert!(init_hardware(2, ChipConfig::default()).is_err());
    assert_eq!(hardware_init_count(), 1);

    let a = acquire_chips(1).unwrap();
    let b = acquire_chips(1).unwrap();
    assert_ne!(a.chip_indices(), b.chip_indices());
    assert_eq!(hardware().free_chips(), 0);
    drop((a, b));
    assert_eq!(hardware().free_chips(), 2);
}
