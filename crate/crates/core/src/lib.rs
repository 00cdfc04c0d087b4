//! Dual-energy radiographic transparency modeling and per-pixel (λ, Z)
//! reconstruction.
//!
//! The pipeline, in dependency order:
//!
//! - [`xsec`] — per-element partial mass attenuation coefficients
//!   (photoelectric / Compton / pair production) with log-log energy
//!   interpolation, plus a physically-motivated synthetic library.
//! - [`beam`] — discrete energy grids, source spectra, detector response,
//!   and the parameterized bremsstrahlung / scintillator generators.
//! - [`forward`] — the semiempirical transparency model α̃(λ, z) for a
//!   calibrated beam pair, its λ-derivatives, and the dense (λ, Z) lookup
//!   tables the reconstruction consumes.
//! - [`calibrate`] — damped Gauss-Newton fit of the per-beam (a, b, c)
//!   semiempirical coefficients from reference transparencies.
//! - [`groundtruth`] — effective (λ_eff, z_eff) for heterogeneous pixel
//!   stacks by exact matching of both log-transparencies.
//! - [`image`] — dual-energy image planes and the binary plane container.
//! - [`segment`] — graph-based (Felzenszwalb) segmentation of the
//!   (α_H, α_L) planes.
//! - [`recon`] — per-segment χ² minimization over integer Z with per-pixel
//!   Newton λ solves, two-pass shield stripping, and noise ensembles.
//! - [`phantom`] — synthetic scene construction, ideal rendering, and the
//!   multiplicative noise model.

pub mod beam;
pub mod calibrate;
pub mod error;
pub mod forward;
pub mod groundtruth;
pub mod image;
pub mod par;
pub mod phantom;
pub mod recon;
pub mod segment;
pub mod xsec;

pub use error::{Error, Result};
