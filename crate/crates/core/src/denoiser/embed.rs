//! Fixed sinusoidal embeddings and the frozen label-text table.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// `[sin(p/10000^{2i/dim}) …, cos(p/10000^{2i/dim}) …]` for `i < dim/2`.
pub fn sinusoidal_embed(position: usize, dim: usize) -> Result<Array1<f64>> {
    sinusoidal_embed_f(position as f64, dim)
}

/// [`sinusoidal_embed`] at a fractional position.
pub fn sinusoidal_embed_f(position: f64, dim: usize) -> Result<Array1<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Parameter(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    Ok(out)
}

/// Row/column embedding: first half encodes `row`, second half `col`.
pub fn spatial_embed(row: f64, col: f64, dim: usize) -> Result<Array1<f64>> {
    if dim % 4 != 0 {
        return Err(Error::Parameter(format!("spatial embedding dim {dim} must be divisible by 4")));
    }
    let mut out = Array1::zeros(dim);
    out.slice_mut(ndarray::s![..dim / 2])
        .assign(&sinusoidal_embed_f(row, dim / 2)?);
    out.slice_mut(ndarray::s![dim / 2..])
        .assign(&sinusoidal_embed_f(col, dim / 2)?);
    Ok(out)
}

/// Frozen per-label vectors derived from label text.
///
/// Each lowercase word of a label is hashed together with `seed` into a
/// Gaussian vector; a label's vector is the normalized sum of its words'
/// vectors. Labels sharing words end up close, which is the property a
/// pretrained text encoder would supply.
pub fn text_table(names: &[String], dim: usize, seed: u64) -> Array2<f64> {
    let mut table = Array2::zeros((names.len(), dim));
    for (r, name) in names.iter().enumerate() {
        let mut row = Array1::<f64>::zeros(dim);
        for word in name
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let mut hasher = Sha256::new();
            hasher.update(seed.to_le_bytes());
            hasher.update(word.to_lowercase().as_bytes());
            let digest = hasher.finalize();
            let word_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut rng = seeded_rng(word_seed);
            row += &Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
        }
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
        table.row_mut(r).assign(&row);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero() {
        let e = sinusoidal_embed(0, 8).unwrap();
        assert!(e.slice(ndarray::s![..4]).iter().all(|&v| v == 0.0));
        assert!(e.slice(ndarray::s![4..]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn position_one_dim_four() {
        let e = sinusoidal_embed(1, 4).unwrap();
        let want = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((e[1] - 0.009_999_833).abs() < 1e-6);
    }

    #[test]
    fn bounded_entries_and_norm() {
        for p in [0, 1, 7, 999, 123_456] {
            let e = sinusoidal_embed(p, 16).unwrap();
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
            // each sin/cos pair contributes exactly 1
            assert!((e.dot(&e) - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(sinusoidal_embed(3, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn text_table_is_deterministic_and_word_sensitive() {
        let names: Vec<String> = ["grasp tool1 gallbladder", "retract tool1 gallbladder", "idle"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = text_table(&names, 16, 3);
        assert_eq!(a, text_table(&names, 16, 3));
        let sim01 = a.row(0).dot(&a.row(1));
        let sim02 = a.row(0).dot(&a.row(2));
        assert!(sim01 > sim02);
        assert!((a.row(2).dot(&a.row(2)) - 1.0).abs() < 1e-12);
    }
}
