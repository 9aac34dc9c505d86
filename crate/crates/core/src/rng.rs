//! Deterministic counter-based PRNG with splittable streams.
//!
//! The generator is SplitMix64 viewed as a counter: draw `i` of a stream with
//! key `k` is `mix64(k + (i+1)·GOLDEN)`. Child streams derive fresh keys from
//! `(parent key, label, index)`, so per-(purpose, task, step) streams are
//! independent of scheduling order.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Recorded in every report so runs state which generator produced them.
pub const PRNG_ALGORITHM: &str = "splitmix64-counter/v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const DOMAIN: u64 = 0x517C_C1B7_2722_0A95;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn seed(seed: u64) -> Self {
        Self {
            state: mix64(seed ^ DOMAIN),
        }
    }

    /// Child stream keyed by `(self, label, index)`. Pure: the parent is not
    /// advanced, so experts may derive their streams in any order.
    pub fn derive(&self, label: &str, index: u64) -> Self {
        let mut k = self.state;
        k = mix64(k ^ fnv1a(label.as_bytes()));
        k = mix64(k ^ index.wrapping_mul(GOLDEN));
        Self { state: k }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform in (0, 1]; safe under `ln`.
    fn next_open01(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        (((self.next_u64() >> 11) + 1) as f64) / DEN
    }

    /// One Box-Muller pair of independent standard normals.
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Tensor of i.i.d. standard normal samples.
    pub fn gaussian<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        while data.len() < count {
            let (a, b) = self.next_gaussian_pair();
            data.push(T::of(a));
            if data.len() < count {
                data.push(T::of(b));
            }
        }
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<U>(&mut self, v: &mut [U]) {
        for i in (1..v.len()).rev() {
            let j = self.uniform_index(i + 1);
            v.swap(i, j);
        }
    }
}
