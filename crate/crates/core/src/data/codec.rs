use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodecKind {
    /// Frames of `F` samples become the `F` latent channels unchanged.
    IdentityFrames,
    /// Each frame is rotated by a fixed orthonormal basis.
    OrthoLinear,
}

impl std::str::FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "identityframes" | "identity" => Ok(CodecKind::IdentityFrames),
            "ortholinear" | "ortho" => Ok(CodecKind::OrthoLinear),
            other => Err(Error::InvalidConfig(format!("unknown codec kind `{other}`"))),
        }
    }
}

/// Invertible frame transform between a waveform of `S` samples and a
/// `F × S/F` latent, stored channel-major (`z[d · S′ + s]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    kind: CodecKind,
    frame_size: usize,
    /// Row-major `F × F`; columns are the basis vectors.
    basis: Option<Vec<f64>>,
    /// Latents are the transformed frames times this factor.
    scale: f64,
}

impl Codec {
    pub fn new(kind: CodecKind, frame_size: usize, seed: u64) -> Result<Self> {
        if frame_size == 0 {
            return Err(Error::InvalidConfig("frame_size must be at least 1".into()));
        }
        let basis = match kind {
            CodecKind::IdentityFrames => None,
            CodecKind::OrthoLinear => Some(orthonormal_basis(frame_size, seed)),
        };
        Ok(Self {
            kind,
            frame_size,
            basis,
            scale: 1.0,
        })
    }

    /// Multiplies latents by `scale` on encode and divides on decode.
    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("latent scale must be positive (got {scale})")));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn basis(&self) -> Option<&[f64]> {
        self.basis.as_deref()
    }

    fn frames(&self, len: usize) -> Result<usize> {
        if !len.is_multiple_of(self.frame_size) {
            return Err(Error::InvalidInput(format!(
                "length {len} not divisible by frame size {}",
                self.frame_size
            )));
        }
        Ok(len / self.frame_size)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.frame_size;
        let frames = self.frames(x.len())?;
        let mut z = vec![0.0; x.len()];
        for s in 0..frames {
            let frame = &x[s * f..(s + 1) * f];
            for d in 0..f {
                let v: f64 = match &self.basis {
                    None => frame[d],
                    // Bᵀ · frame: coefficient along basis column d.
                    Some(b) => (0..f).map(|r| b[r * f + d] * frame[r]).sum(),
                };
                z[d * frames + s] = v * self.scale;
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let f = self.frame_size;
        let frames = self.frames(z.len())?;
        let mut x = vec![0.0; z.len()];
        for s in 0..frames {
            for r in 0..f {
                let v: f64 = match &self.basis {
                    None => z[r * frames + s],
                    Some(b) => (0..f).map(|d| b[r * f + d] * z[d * frames + s]).sum(),
                };
                x[s * f + r] = v / self.scale;
            }
        }
        Ok(x)
    }
}

/// Q factor of a seeded Gaussian matrix.
fn orthonormal_basis(n: usize, seed: u64) -> Vec<f64> {
    let g = DMatrix::from_row_slice(n, n, &gaussian_vec(&mut seeded(seed), n * n));
    let q = g.qr().q();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = q[(r, c)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn identity_layout() {
        let c = Codec::new(CodecKind::IdentityFrames, 2, 0).unwrap();
        let z = c.encode(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(z, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
        assert!(c.encode(&[1.0; 5]).is_err());
    }

    #[test]
    fn basis_is_orthonormal() {
        let c = Codec::new(CodecKind::OrthoLinear, 32, 7).unwrap();
        let b = c.basis().unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let dot: f64 = (0..32).map(|r| b[r * 32 + i] * b[r * 32 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
        assert_eq!(Codec::new(CodecKind::OrthoLinear, 32, 7).unwrap(), c);
    }

    #[test]
    fn round_trip_on_many_waveforms() {
        let mut rng = seeded(3);
        for kind in [CodecKind::IdentityFrames, CodecKind::OrthoLinear] {
            let c = Codec::new(kind, 16, 1).unwrap();
            for _ in 0..1000 {
                let x = gaussian_vec(&mut rng, 64);
                let back = c.decode(&c.encode(&x).unwrap()).unwrap();
                let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10);
            }
            assert!(c.encode(&[0.0; 32]).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("identity_frames".parse::<CodecKind>().unwrap(), CodecKind::IdentityFrames);
        assert_eq!("OrthoLinear".parse::<CodecKind>().unwrap(), CodecKind::OrthoLinear);
        assert!("mp3".parse::<CodecKind>().is_err());
    }

    proptest! {
        #[test]
        fn ortho_preserves_frame_norm(x in proptest::collection::vec(-1f64..1.0, 8)) {
            let c = Codec::new(CodecKind::OrthoLinear, 8, 5).unwrap();
            let z = c.encode(&x).unwrap();
            let nx: f64 = x.iter().map(|v| v * v).sum();
            let nz: f64 = z.iter().map(|v| v * v).sum();
            prop_assert!((nx - nz).abs() < 1e-10);
        }
    }
}
