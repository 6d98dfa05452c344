mod common;

use rescreen_core::screen::ProcessId;

#[test]
fn round_trip_per_process() {
    for (id, ppi, rot) in [
        (ProcessId::Paget, 2000.0, 0.0),
        (ProcessId::Paget, 2000.0, 1.7),
        (ProcessId::Finlay, 1500.0, 0.8),
        (ProcessId::Thames, 2000.0, 0.4),
        (ProcessId::Joly, 1000.0, 0.5),
        (ProcessId::Dufay, 4000.0, 0.3),
    ] {
        let r = common::round_trip_rms(id, ppi, 5, rot);
        assert!(r.iter().all(|&e| e < 0.05), "{id:?} at {ppi} PPI: {r:?}");
    }
}
