//! Boundary layers at widths the grid can resolve. The Monte Carlo estimator
//! only accepts `eps <= delta / 500`, which is far below the spacing of any
//! desk-size grid, so this test reads exterior distances directly.

use tbq_core::corpus::grid1d_cloud;
use tbq_core::dyadic::exterior_distances;
use tbq_core::random_dyadic::{sample_random_system, ReferenceFrame};
use tbq_core::rng::trial_seed;
use tbq_core::stats::{log_log_slope, Proportion};

#[test]
fn layer_frequency_grows_with_width() {
    let cloud = grid1d_cloud(400).unwrap();
    let delta = 0.25;
    let frame = ReferenceFrame::new(&cloud, delta).unwrap();
    let k = frame.k_min + 1;
    let side = delta.powi(k);
    let widths = [0.01, 0.02, 0.04, 0.08, 0.16];
    let trials = 400;
    let mut hits = [0u64; 5];
    for t in 0..trials {
        let sys = sample_random_system(&cloud, &frame, trial_seed(21, t)).unwrap().system;
        for ext in exterior_distances(&cloud, &sys, k) {
            for (h, w) in hits.iter_mut().zip(widths) {
                *h += (ext <= w * side) as u64;
            }
        }
    }
    let total = trials * cloud.n() as u64;
    let p: Vec<Proportion> = hits.iter().map(|&h| Proportion::wilson(h, total)).collect();
    for w in p.windows(2) {
        assert!(w[0].freq <= w[1].freq, "{:?}", p);
        assert!(w[0].ci_hi < w[1].ci_lo, "layers should be distinguishable: {:?}", p);
    }
    let slope = log_log_slope(&widths, &p.iter().map(|q| q.freq).collect::<Vec<_>>()).unwrap();
    assert!(slope > 0.0, "slope {slope}");
}
