use slabpen::io::{read_measurements, read_profiles, write_measurements, write_profiles};
use slabpen::phantom::acquire;
use slabpen::{
    admm_reconstruct, fit_tensor, lsq_pen, make_phantom, make_profiles, make_tensor_field, psnr, synth_dwi, AdmmConfig,
    DiffusionProtocol, PhantomSpec, Prior, ProfileSpec, SlabGeometry, TvConfig, Volume,
};

fn phantom(n: usize) -> Volume {
    make_phantom(&PhantomSpec {
        shape: [n, n, n],
        ..PhantomSpec::default()
    })
    .unwrap()
}

#[test]
fn files_round_trip_into_the_same_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let g = SlabGeometry::new(4, 6).unwrap();
    let profiles = make_profiles(g, &ProfileSpec::default(), 3).unwrap();
    let truth = make_phantom(&PhantomSpec {
        shape: [12, 10, 24],
        ..PhantomSpec::default()
    })
    .unwrap();
    let mut mask = g.full_mask();
    mask[2] = false;
    let meas = acquire(&truth, &profiles, &mask, 0.01, 4).unwrap();
    write_measurements(&meas, dir.path().join("m.svol")).unwrap();
    write_profiles(&profiles, dir.path().join("p.svol")).unwrap();
    let meas2 = read_measurements(dir.path().join("m.svol")).unwrap();
    let profiles2 = read_profiles(dir.path().join("p.svol")).unwrap();
    assert_eq!(meas2.mask(), meas.mask());
    // files hold f32
    let a = lsq_pen(&meas2, &profiles2).unwrap();
    assert!(a.sub(&lsq_pen(&meas, &profiles).unwrap()).norm() < 1e-4 * a.norm());
}

#[test]
fn tv_admm_beats_lsq_on_noisy_data() {
    let g = SlabGeometry::new(4, 8).unwrap();
    let profiles = make_profiles(g, &ProfileSpec::default(), 0).unwrap();
    let truth = phantom(32);
    let mut mask = g.full_mask();
    mask[1] = false;
    let meas = acquire(&truth, &profiles, &mask, 0.05, 9).unwrap();
    let lsq = lsq_pen(&meas, &profiles).unwrap();
    let cfg = AdmmConfig {
        lambda: 0.1,
        outer_iters: 10,
        ..AdmmConfig::new(Prior::Tv(TvConfig::new(0.1)))
    };
    let tv = admm_reconstruct(&meas, &profiles, &cfg).unwrap().volume;
    let peak = truth.max_abs();
    let (p_lsq, p_tv) = (psnr(&lsq, &truth, peak).unwrap(), psnr(&tv, &truth, peak).unwrap());
    assert!(p_tv > p_lsq, "tv {p_tv} vs lsq {p_lsq}");
}

#[test]
fn noiseless_diffusion_survives_slab_encoding() {
    let n = 16;
    let g = SlabGeometry::new(2, 8).unwrap();
    let profiles = make_profiles(g, &ProfileSpec::default(), 1).unwrap();
    let s0 = phantom(n);
    let field = make_tensor_field([n, n, n], 2);
    let proto = DiffusionProtocol::default();
    let dwis = synth_dwi(&s0, &field, &proto).unwrap();
    let recon: Vec<Volume> = dwis
        .iter()
        .map(|d| lsq_pen(&acquire(d, &profiles, &g.full_mask(), 0.0, 0).unwrap(), &profiles).unwrap())
        .collect();
    let threshold = 0.05 * s0.max_abs();
    let truth = fit_tensor(&dwis, &proto, threshold).unwrap();
    let fit = fit_tensor(&recon, &proto, threshold).unwrap();
    assert_eq!(fit.mask, truth.mask);
    let worst = fit
        .fa
        .data()
        .iter()
        .zip(truth.fa.data())
        .map(|(a, b)| (a.re - b.re).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "FA deviation {worst:e}");
}
