use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Angular frequency of band 0; band `k` uses `2^k` times this.
///
/// A period of 8 scaled units keeps the lowest band injective over the
/// coordinate range seen in practice (clean structures in `[-1, 1]`, noise
/// rarely beyond `±4`).
pub const FOURIER_BASE_FREQ: f64 = std::f64::consts::PI / 4.0;

/// Fourier features of 3-D points: per axis `sin(ω_k p)` for `k < n_freq`
/// followed by `cos(ω_k p)`, axes concatenated, giving `[N, 6·n_freq]`.
pub fn fourier_embed<T: Scalar>(points: &[[f64; 3]], n_freq: usize) -> Tensor<T> {
    let width = 6 * n_freq;
    let mut data = Vec::with_capacity(points.len() * width);
    for p in points {
        for &x in p {
            for k in 0..n_freq {
                data.push(T::from_f64_lossy((freq(k) * x).sin()));
            }
            for k in 0..n_freq {
                data.push(T::from_f64_lossy((freq(k) * x).cos()));
            }
        }
    }
    Tensor::new(vec![points.len(), width], data).expect("shape by construction")
}

fn freq(k: usize) -> f64 {
    FOURIER_BASE_FREQ * (1u64 << k) as f64
}

/// Sinusoidal embedding of a scalar (DiT-style, `t` multiplied by 1000 so
/// that `t ∈ [0, 1]` spans the usual frequency range). Returns `[1, dim]`.
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let arg = t * 1000.0;
    let mut data = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    data.extend(freqs.iter().map(|f| T::from_f64_lossy((arg * f).cos())));
    data.extend(freqs.iter().map(|f| T::from_f64_lossy((arg * f).sin())));
    if dim % 2 == 1 {
        data.push(T::zero());
    }
    Tensor::new(vec![1, dim], data).expect("shape by construction")
}
