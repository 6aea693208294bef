//! Energy `E(s) = 0.5 |s - psi(s)|^2` of two-channel slices and its exact
//! gradient, plus the three-axis volume energy.
//!
//! The network is positively homogeneous, so scaling a slice to unit peak
//! magnitude before `psi` and undoing it afterwards changes nothing; inference
//! therefore runs on the raw slice.

use super::conv::Tensor;
use super::model::EnergyModel;
use crate::error::{Error, Result};
use crate::volume::{extract_slices, scatter_slices, Axis, Slice2C, Volume};

pub(crate) fn slice_to_tensor(s: &Slice2C) -> Tensor {
    let [n0, n1] = s.shape();
    Tensor::from_vec(2, n1, n0, s.data().to_vec())
}

pub(crate) fn tensor_to_slice(t: Tensor) -> Slice2C {
    Slice2C::from_planes([t.w, t.h], t.data).expect("two-channel tensor")
}

fn check_divisible(s: &Slice2C, model: &EnergyModel) -> Result<()> {
    let m = model.arch().size_multiple();
    let [n0, n1] = s.shape();
    if n0 % m != 0 || n1 % m != 0 {
        return Err(Error::Shape(format!(
            "slice {n0}x{n1} is not divisible by {m}; pad or use the volume functions"
        )));
    }
    Ok(())
}

/// Mirror index without edge repetition; period `2(n-1)`.
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let r = i % p;
    if r < n {
        r
    } else {
        p - r
    }
}

fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Reflect-pads at the high end of both axes up to multiples of `m`.
fn pad(t: &Tensor, m: usize) -> Tensor {
    let (ph, pw) = (padded_len(t.h, m), padded_len(t.w, m));
    if (ph, pw) == (t.h, t.w) {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.c, ph, pw);
    for c in 0..t.c {
        for y in 0..ph {
            let sy = reflect_index(y, t.h);
            for x in 0..pw {
                out.data[(c * ph + y) * pw + x] = t.data[(c * t.h + sy) * t.w + reflect_index(x, t.w)];
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds padded samples back onto their sources.
fn pad_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    if (g.h, g.w) == (h, w) {
        return g.clone();
    }
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            let sy = reflect_index(y, h);
            for x in 0..g.w {
                out.data[(c * h + sy) * w + reflect_index(x, w)] += g.data[(c * g.h + y) * g.w + x];
            }
        }
    }
    out
}

fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    if (t.h, t.w) == (h, w) {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.c, h, w);
    for c in 0..t.c {
        for y in 0..h {
            let src = (c * t.h + y) * t.w;
            out.data[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&t.data[src..src + w]);
        }
    }
    out
}

fn crop_adjoint(t: &Tensor, ph: usize, pw: usize) -> Tensor {
    if (t.h, t.w) == (ph, pw) {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.c, ph, pw);
    for c in 0..t.c {
        for y in 0..t.h {
            let dst = (c * ph + y) * pw;
            out.data[dst..dst + t.w].copy_from_slice(&t.data[(c * t.h + y) * t.w..(c * t.h + y + 1) * t.w]);
        }
    }
    out
}

/// Energy and optionally score of one slice, padding as needed.
fn eval_tensor(x: &Tensor, model: &EnergyModel, want_score: bool) -> (f64, Option<Tensor>) {
    let net = model.network();
    let params = model.params();
    let m = model.arch().size_multiple();
    let xp = pad(x, m);
    let (ph, pw) = (xp.h, xp.w);
    let values = net.forward(params, xp);
    let psi = crop(values.last().expect("network output"), x.h, x.w);
    let mut r = x.clone();
    for (a, b) in r.data.iter_mut().zip(&psi.data) {
        *a -= b;
    }
    let energy = 0.5 * r.dot(&r);
    if !want_score {
        return (energy, None);
    }
    let seed = crop_adjoint(&r, ph, pw);
    let jt = net
        .reverse(params, &values, &values, seed, None, true)
        .expect("input gradient");
    let jt = pad_adjoint(&jt, x.h, x.w);
    for (a, b) in r.data.iter_mut().zip(&jt.data) {
        *a -= b;
    }
    (energy, Some(r))
}

/// Network output for a slice whose extents are divisible by the scale factor.
pub fn psi_forward(s: &Slice2C, model: &EnergyModel) -> Result<Slice2C> {
    check_divisible(s, model)?;
    let values = model
        .network()
        .forward(model.params(), slice_to_tensor(s));
    Ok(tensor_to_slice(values.into_iter().last().expect("network output")))
}

pub fn energy_slice(s: &Slice2C, model: &EnergyModel) -> Result<f64> {
    check_divisible(s, model)?;
    Ok(eval_tensor(&slice_to_tensor(s), model, false).0)
}

/// `(I - J_psi(s))^T (s - psi(s))`.
pub fn score_slice(s: &Slice2C, model: &EnergyModel) -> Result<Slice2C> {
    check_divisible(s, model)?;
    let (_, g) = eval_tensor(&slice_to_tensor(s), model, true);
    Ok(tensor_to_slice(g.expect("score requested")))
}

/// Energy of an arbitrary-size slice, reflect-padded through the network and
/// cropped before the residual is formed.
pub fn energy_slice_padded(s: &Slice2C, model: &EnergyModel) -> f64 {
    eval_tensor(&slice_to_tensor(s), model, false).0
}

pub fn energy_and_score_slice_padded(s: &Slice2C, model: &EnergyModel) -> (f64, Slice2C) {
    let (e, g) = eval_tensor(&slice_to_tensor(s), model, true);
    (e, tensor_to_slice(g.expect("score requested")))
}

fn volume_eval(v: &Volume, model: &EnergyModel, want_score: bool) -> Result<(f64, Option<Volume>)> {
    v.ensure_finite("volume")?;
    let mut energy = 0.0;
    let mut score = want_score.then(|| Volume::zeros(v.shape()));
    for axis in Axis::ALL {
        let slices = extract_slices(v, axis);
        let mut grads = Vec::with_capacity(if want_score { slices.len() } else { 0 });
        for s in &slices {
            let (e, g) = eval_tensor(&slice_to_tensor(s), model, want_score);
            energy += e;
            if let Some(g) = g {
                grads.push(tensor_to_slice(g));
            }
        }
        if let Some(acc) = score.as_mut() {
            acc.axpy(1.0, &scatter_slices(&grads, axis, v.shape())?);
        }
    }
    let third = 1.0 / 3.0;
    let score = score.map(|s| s.scale(third).with_voxel_size(v.voxel_size()));
    if !energy.is_finite() {
        return Err(Error::Numerical("volume energy is not finite".into()));
    }
    Ok((energy * third, score))
}

/// Mean over the three axes of the summed slice energies.
pub fn energy_volume(v: &Volume, model: &EnergyModel) -> Result<f64> {
    Ok(volume_eval(v, model, false)?.0)
}

/// Exact gradient of [`energy_volume`].
pub fn score_volume(v: &Volume, model: &EnergyModel) -> Result<Volume> {
    Ok(volume_eval(v, model, true)?.1.expect("score requested"))
}

pub fn energy_and_score_volume(v: &Volume, model: &EnergyModel) -> Result<(f64, Volume)> {
    let (e, s) = volume_eval(v, model, true)?;
    Ok((e, s.expect("score requested")))
}
