//! Synthetic clustered mm-Wave channels, noisy pilot CSI and the `HBFD` dataset format.
//!
//! Each user's channel is a sum of `N_c · N_r` planar-wave rays impinging on a
//! half-wavelength uniform linear array:
//!
//! ```text
//! h_u = sqrt(N_T / (N_c N_r)) · Σ_{c,r} α_{c,r} · a(φ_{c,r}) / sqrt(N_T)
//! a(φ)_n = exp(jπ (n−1) sin φ)
//! ```
//!
//! with `α ~ CN(0, 1)`, so that `E‖h_u‖² = N_T`. Cluster centres are uniform in
//! ±60° and ray offsets are Gaussian with the configured per-cluster spread.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precoding::CMatrix;

const CLUSTER_CENTRE_RANGE_DEG: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModelParams {
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub angle_spread_deg: f64,
    pub seed: u64,
}

impl Default for ChannelModelParams {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            rays_per_cluster: 5,
            angle_spread_deg: 7.5,
            seed: 0,
        }
    }
}

impl ChannelModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.rays_per_cluster == 0 {
            return Err(Error::Parameter(
                "channel model needs at least one cluster and one ray".into(),
            ));
        }
        if !(self.angle_spread_deg > 0.0) {
            return Err(Error::Parameter(format!(
                "angle spread {} must be > 0",
                self.angle_spread_deg
            )));
        }
        Ok(())
    }
}

/// One downlink channel: `N_U × N_T`, row `u` belongs to user `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: CMatrix,
}

/// Noisy base-station estimate `Ĥ = H† + η`, `N_T × N_U`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyCsi {
    pub h_hat: CMatrix,
    pub pilot_noise_power: f64,
}

/// A set of channels sharing dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBatch {
    pub n_u: usize,
    pub n_t: usize,
    pub channels: Vec<CMatrix>,
}

impl ChannelBatch {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> ChannelBatch {
        ChannelBatch {
            n_u: self.n_u,
            n_t: self.n_t,
            channels: indices.iter().map(|&i| self.channels[i].clone()).collect(),
        }
    }
}

/// Deterministic RNG for item `index` of the stream identified by `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn complex_normal(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Unnormalized ULA response `a(φ)_n = exp(jπ n sin φ)`, `n = 0..N_T`.
pub fn steering_vector(n_t: usize, angle: f64) -> Vec<Complex64> {
    (0..n_t)
        .map(|n| Complex64::from_polar(1.0, PI * n as f64 * angle.sin()))
        .collect()
}

/// One user's channel row from explicit rays `(α, φ)`.
pub fn channel_from_rays(n_t: usize, rays: &[(Complex64, f64)]) -> Vec<Complex64> {
    let scale = 1.0 / (rays.len() as f64).sqrt();
    let mut h = vec![Complex64::new(0.0, 0.0); n_t];
    for &(alpha, angle) in rays {
        for (hn, an) in h.iter_mut().zip(steering_vector(n_t, angle)) {
            *hn += scale * alpha * an;
        }
    }
    h
}

fn draw_user(params: &ChannelModelParams, n_t: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let spread = Normal::new(0.0, params.angle_spread_deg.to_radians())
        .expect("validated angle spread");
    let range = CLUSTER_CENTRE_RANGE_DEG.to_radians();
    let mut rays = Vec::with_capacity(params.n_clusters * params.rays_per_cluster);
    for _ in 0..params.n_clusters {
        let centre = rng.gen_range(-range..=range);
        for _ in 0..params.rays_per_cluster {
            let angle = centre + spread.sample(rng);
            rays.push((complex_normal(rng, 1.0), angle));
        }
    }
    channel_from_rays(n_t, &rays)
}

/// Realization number `index` of the dataset defined by `params.seed`.
pub fn generate_channel_at(
    params: &ChannelModelParams,
    n_t: usize,
    n_u: usize,
    index: u64,
) -> Result<ChannelRealization> {
    params.validate()?;
    if n_t == 0 || n_u == 0 {
        return Err(Error::Parameter("N_T and N_U must be positive".into()));
    }
    let mut rng = stream_rng(params.seed, index);
    let mut h = CMatrix::zeros(n_u, n_t);
    for u in 0..n_u {
        let row = draw_user(params, n_t, &mut rng);
        for (n, v) in row.into_iter().enumerate() {
            h[(u, n)] = v;
        }
    }
    Ok(ChannelRealization { h })
}

pub fn generate_channel(
    params: &ChannelModelParams,
    n_t: usize,
    n_u: usize,
) -> Result<ChannelRealization> {
    generate_channel_at(params, n_t, n_u, 0)
}

/// `count` realizations, generated in parallel from per-index streams.
pub fn generate_batch(
    params: &ChannelModelParams,
    n_t: usize,
    n_u: usize,
    count: usize,
) -> Result<ChannelBatch> {
    let channels = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_channel_at(params, n_t, n_u, i).map(|r| r.h))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelBatch { n_u, n_t, channels })
}

/// `Ĥ = H† + η` with `η` circular Gaussian of per-entry variance `power`.
pub fn add_pilot_noise(h: &CMatrix, power: f64, seed: u64) -> Result<NoisyCsi> {
    add_pilot_noise_with(h, power, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn add_pilot_noise_with(h: &CMatrix, power: f64, rng: &mut impl Rng) -> Result<NoisyCsi> {
    if !(power >= 0.0) || !power.is_finite() {
        return Err(Error::Parameter(format!("pilot noise power {power} must be ≥ 0")));
    }
    let mut h_hat = h.adjoint();
    if power > 0.0 {
        h_hat.iter_mut().for_each(|x| *x += complex_normal(rng, power));
    }
    Ok(NoisyCsi {
        h_hat,
        pilot_noise_power: power,
    })
}

const MAGIC: &[u8; 4] = b"HBFD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// Encode `HBFD` v1: little-endian header then `(re f32, im f32)` entries, user-major.
pub fn encode_dataset(batch: &ChannelBatch) -> Result<Vec<u8>> {
    if batch.channels.is_empty() {
        return Err(Error::Parameter("cannot write an empty dataset".into()));
    }
    if batch
        .channels
        .iter()
        .any(|h| h.shape() != (batch.n_u, batch.n_t))
    {
        return Err(Error::Parameter("inconsistent channel dimensions".into()));
    }
    let n_u = u32::try_from(batch.n_u).map_err(|_| Error::Parameter("N_U overflow".into()))?;
    let n_t = u32::try_from(batch.n_t).map_err(|_| Error::Parameter("N_T overflow".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + batch.len() * batch.n_u * batch.n_t * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n_u.to_le_bytes());
    out.extend_from_slice(&n_t.to_le_bytes());
    out.extend_from_slice(&(batch.len() as u64).to_le_bytes());
    for h in &batch.channels {
        for u in 0..batch.n_u {
            for n in 0..batch.n_t {
                let v = h[(u, n)];
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ChannelBatch> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an HBFD dataset".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported HBFD version {version}")));
    }
    let n_u = u32_at(8) as usize;
    let n_t = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if n_u == 0 || n_t == 0 || count == 0 {
        return Err(Error::Format("zero dimension in header".into()));
    }
    let record = (n_u as u64)
        .checked_mul(n_t as u64)
        .and_then(|e| e.checked_mul(8))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let body = record
        .checked_mul(count)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available != body {
        return Err(Error::Format(format!(
            "body has {available} bytes, header implies {body}"
        )));
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let mut channels = Vec::with_capacity(count as usize);
    let mut off = HEADER_LEN;
    for _ in 0..count {
        let mut h = CMatrix::zeros(n_u, n_t);
        for u in 0..n_u {
            for n in 0..n_t {
                h[(u, n)] = Complex64::new(f32_at(off), f32_at(off + 4));
                off += 8;
            }
        }
        if h.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Format("non-finite channel entry".into()));
        }
        channels.push(h);
    }
    Ok(ChannelBatch { n_u, n_t, channels })
}

/// Write a dataset atomically (temp file + rename).
pub fn write_dataset(path: &Path, batch: &ChannelBatch) -> Result<()> {
    let bytes = encode_dataset(batch)?;
    crate::persist::write_atomic(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<ChannelBatch> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_broadside_ray_is_all_ones() {
        let h = channel_from_rays(6, &[(Complex64::new(1.0, 0.0), 0.0)]);
        assert!(h.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn same_seed_same_channel() {
        let p = ChannelModelParams {
            seed: 11,
            ..Default::default()
        };
        let a = generate_channel(&p, 8, 3).unwrap();
        let b = generate_channel(&p, 8, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_channel(&ChannelModelParams { seed: 12, ..p }, 8, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_generation_matches_per_index() {
        let p = ChannelModelParams::default();
        let batch = generate_batch(&p, 4, 2, 5).unwrap();
        assert_eq!(batch.channels[3], generate_channel_at(&p, 4, 2, 3).unwrap().h);
    }

    #[test]
    fn zero_pilot_noise_is_exact_adjoint() {
        let h = generate_channel(&ChannelModelParams::default(), 4, 2).unwrap().h;
        let csi = add_pilot_noise(&h, 0.0, 3).unwrap();
        assert_eq!(csi.h_hat, h.adjoint());
        assert!(matches!(add_pilot_noise(&h, -1.0, 3), Err(Error::Parameter(_))));
        assert_eq!(add_pilot_noise(&h, 0.5, 9).unwrap(), add_pilot_noise(&h, 0.5, 9).unwrap());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = ChannelModelParams {
            n_clusters: 0,
            ..Default::default()
        };
        assert!(generate_channel(&p, 4, 2).is_err());
    }

    #[test]
    fn decode_rejects_bad_input() {
        let batch = generate_batch(&ChannelModelParams::default(), 4, 2, 3).unwrap();
        let bytes = encode_dataset(&batch).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Format(_))));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode_dataset(&version), Err(Error::Format(_))));
        let mut huge = bytes;
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_dataset(&huge), Err(Error::Format(_))));
        let empty = ChannelBatch {
            n_u: 2,
            n_t: 4,
            channels: vec![],
        };
        assert!(matches!(encode_dataset(&empty), Err(Error::Parameter(_))));
    }
}
