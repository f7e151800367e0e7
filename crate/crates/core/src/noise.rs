//! Counter-based Gaussian noise.
//!
//! Every sample is a pure function of `(seed, stream_id, step, index)`, so the
//! noise an image receives does not depend on processing order or on how many
//! workers run.
//!
//! Generator: Philox4x64-10 (Salmon et al., "Parallel random numbers: as easy
//! as 1, 2, 3"). Block `b` of a key is
//! `philox(counter = [key.counter + b, stream_id, step, 0], key = [seed, 0])`,
//! yielding four `u64` words. Words are turned into uniforms on `(0, 1]` /
//! `[0, 1)` with their top 53 bits and into normals by Box-Muller, pairing
//! words `(0, 1)` and `(2, 3)`: `r = sqrt(-2 ln u0)`, `z = (r cos 2pi u1, r sin 2pi u1)`.
//! Transcendentals come from `libm` so results do not depend on the platform
//! C library. Output is frozen by golden vectors under `tests/golden/`.

use std::f64::consts::TAU;

use crate::error::Result;
use crate::latent::Latent;

const PHILOX_M0: u64 = 0xD2E7_470E_E14C_6C93;
const PHILOX_M1: u64 = 0xCA5A_8263_9512_1157;
const PHILOX_W0: u64 = 0x9E37_79B9_7F4A_7C15;
const PHILOX_W1: u64 = 0xBB67_AE85_84CA_A73B;
const ROUNDS: usize = 10;

#[inline(always)]
fn mulhilo(a: u64, b: u64) -> (u64, u64) {
    let p = (a as u128) * (b as u128);
    ((p >> 64) as u64, p as u64)
}

/// Philox4x64 with 10 rounds.
#[inline]
pub fn philox4x64(counter: [u64; 4], key: [u64; 2]) -> [u64; 4] {
    let mut c = counter;
    let mut k = key;
    for r in 0..ROUNDS {
        if r > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Identifies one independent block of noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    /// Usually the image index or a hash of the record id.
    pub stream_id: u64,
    pub step: u32,
    /// Starting block offset within the stream.
    pub counter: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, stream_id: u64, step: u32) -> Self {
        Self {
            seed,
            stream_id,
            step,
            counter: 0,
        }
    }

    pub fn with_step(self, step: u32) -> Self {
        Self { step, ..self }
    }

    pub fn with_stream(self, stream_id: u64) -> Self {
        Self { stream_id, ..self }
    }

    /// Standard normal samples for this key, in order.
    pub fn normals(self) -> NormalStream {
        NormalStream {
            key: self,
            block: 0,
            buf: [0.0; 4],
            pos: 4,
        }
    }

    #[inline]
    fn block(&self, b: u64) -> [u64; 4] {
        philox4x64(
            [
                self.counter.wrapping_add(b),
                self.stream_id,
                self.step as u64,
                0,
            ],
            [self.seed, 0],
        )
    }
}

#[inline(always)]
fn open_unit(w: u64) -> f64 {
    ((w >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline(always)]
fn half_open_unit(w: u64) -> f64 {
    (w >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline(always)]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let r = (-2.0 * libm::log(open_unit(a))).sqrt();
    let (s, c) = libm::sincos(TAU * half_open_unit(b));
    (r * c, r * s)
}

/// Iterator over the standard normals of a [`NoiseKey`].
#[derive(Debug, Clone)]
pub struct NormalStream {
    key: NoiseKey,
    block: u64,
    buf: [f64; 4],
    pos: usize,
}

impl Iterator for NormalStream {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        if self.pos == 4 {
            let w = self.key.block(self.block);
            self.block = self.block.wrapping_add(1);
            let (z0, z1) = box_muller(w[0], w[1]);
            let (z2, z3) = box_muller(w[2], w[3]);
            self.buf = [z0, z1, z2, z3];
            self.pos = 0;
        }
        let v = self.buf[self.pos];
        self.pos += 1;
        Some(v)
    }
}

/// Uniform `[0, 1)` samples, one per Philox word.
pub fn uniforms(key: NoiseKey) -> impl Iterator<Item = f64> {
    (0u64..).flat_map(move |b| key.block(b).map(half_open_unit))
}

/// i.i.d. standard normal tensor of the given shape, determined by `(key, shape)`.
pub fn draw_noise(key: NoiseKey, shape: &[usize]) -> Result<Latent> {
    let template = Latent::zeros(shape.to_vec())?;
    let data = key.normals().take(template.len()).map(|v| v as f32).collect();
    Ok(Latent::from_parts_unchecked(shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs from numpy.random.Philox, whose first draw uses counter + 1.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x64([1, 0, 0, 0], [0, 0]),
            [
                0x02f4_ba64_08e4_d89b,
                0x3dd6_2b0b_9ca8_c5b2,
                0x1c86_67a5_5d90_2e79,
                0x907d_7a05_2fd5_b4dc
            ]
        );
        assert_eq!(
            philox4x64([42, 7, 3, 0], [0x0123_4567_89ab_cdef, 0]),
            [
                0x7bf8_c9c2_e998_8c91,
                0x5df5_34d0_79fc_fb2b,
                0xfdf7_4b18_7057_3442,
                0xf4c9_bc61_2006_de6e
            ]
        );
        assert_eq!(
            philox4x64([u64::MAX; 4], [u64::MAX; 2]),
            [
                0x87b0_92c3_013f_e90b,
                0x438c_3c67_be8d_0224,
                0x9cc7_d7c6_9cd7_77b6,
                0xa09c_aebf_594f_0ba0
            ]
        );
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let key = NoiseKey::new(9, 3, 2);
        let a = draw_noise(key, &[5, 7]).unwrap();
        let b = draw_noise(key, &[5, 7]).unwrap();
        assert_eq!(a, b);
        let c = draw_noise(key, &[3]).unwrap();
        assert_eq!(&a.data()[..3], c.data());
    }

    #[test]
    fn counter_offsets_blocks() {
        let key = NoiseKey::new(1, 2, 3);
        let shifted = NoiseKey { counter: 1, ..key };
        let a: Vec<f64> = key.normals().take(8).collect();
        let b: Vec<f64> = shifted.normals().take(4).collect();
        assert_eq!(&a[4..], &b[..]);
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn million_sample_moments() {
        let xs: Vec<f64> = NoiseKey::new(2024, 0, 0).normals().take(1_000_000).collect();
        let (mean, var) = moments(&xs);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn steps_are_uncorrelated() {
        let n = 1_000_000;
        let a: Vec<f64> = NoiseKey::new(7, 11, 1).normals().take(n).collect();
        let b: Vec<f64> = NoiseKey::new(7, 11, 2).normals().take(n).collect();
        let (ma, va) = moments(&a);
        let (mb, vb) = moments(&b);
        let cov = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.005, "corr {corr}");
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let us: Vec<f64> = uniforms(NoiseKey::new(1, 1, 1)).take(10_000).collect();
        assert!(us.iter().all(|&u| (0.0..1.0).contains(&u)));
        let mean = us.iter().sum::<f64>() / us.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }
}
