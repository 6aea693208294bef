//! Shared fixtures for the criterion benches in `benches/`.

use slabpen::phantom::acquire;
use slabpen::{make_phantom, make_profiles, PhantomSpec, ProfileSpec, SlabGeometry, SlabMeasurements, SlabProfileSet, Volume};

/// Cubic Shepp-Logan phantom with `n_slab` smooth-profile slabs, one dropped.
pub fn problem(n: usize, n_slab: usize) -> (Volume, SlabMeasurements, SlabProfileSet) {
    let g = SlabGeometry::new(n_slab, n / n_slab).expect("geometry");
    let profiles = make_profiles(g, &ProfileSpec::default(), 0).expect("profiles");
    let truth = make_phantom(&PhantomSpec {
        shape: [n, n, n],
        ..PhantomSpec::default()
    })
    .expect("phantom");
    let mut mask = g.full_mask();
    mask[n_slab / 2] = false;
    let meas = acquire(&truth, &profiles, &mask, 0.05, 1).expect("acquire");
    (truth, meas, profiles)
}
