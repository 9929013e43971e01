use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;

/// Supplies standard-normal noise for reparametrized sampling.
///
/// Every stochastic op pulls exactly one buffer per call, in execution
/// order. Recording those buffers and replaying them through
/// [`FrozenNoise`] turns a stochastic forward pass into a deterministic one.
pub trait NoiseSource {
    fn standard_normal(&mut self, len: usize) -> Vec<f64>;
}

impl<T: NoiseSource + ?Sized> NoiseSource for &mut T {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        (**self).standard_normal(len)
    }
}

/// Fresh noise from a random number generator.
#[derive(Debug, Clone)]
pub struct RngNoise<R>(pub R);

impl<R: Rng> NoiseSource for RngNoise<R> {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.0.sample(StandardNormal)).collect()
    }
}

/// Replays a fixed sequence of noise buffers.
///
/// Panics when a draw is requested past the end of the sequence or with a
/// length different from the stored buffer: both mean the replayed
/// computation diverged from the recorded one.
#[derive(Debug, Clone, Default)]
pub struct FrozenNoise {
    draws: VecDeque<Vec<f64>>,
}

impl FrozenNoise {
    pub fn new(draws: Vec<Vec<f64>>) -> Self {
        Self {
            draws: draws.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.draws.len()
    }
}

impl NoiseSource for FrozenNoise {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        let draw = self
            .draws
            .pop_front()
            .expect("frozen noise exhausted: replayed computation made more draws than recorded");
        assert_eq!(
            draw.len(),
            len,
            "frozen noise length mismatch: replayed computation diverged"
        );
        draw
    }
}

/// Forwards draws from an inner source and keeps a copy of each.
pub struct RecordingNoise<N> {
    inner: N,
    draws: Vec<Vec<f64>>,
}

impl<N: NoiseSource> RecordingNoise<N> {
    pub fn new(inner: N) -> Self {
        Self {
            inner,
            draws: Vec::new(),
        }
    }

    pub fn draws(&self) -> &[Vec<f64>] {
        &self.draws
    }

    pub fn into_draws(self) -> Vec<Vec<f64>> {
        self.draws
    }
}

impl<N: NoiseSource> NoiseSource for RecordingNoise<N> {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        let draw = self.inner.standard_normal(len);
        self.draws.push(draw.clone());
        draw
    }
}
