use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, View};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Parameters of the latent-factor two-view generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub num_identities: usize,
    pub samples_per_view: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub view_shift_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            num_identities: 200,
            samples_per_view: 4,
            latent_dim: 16,
            feature_dim: 32,
            view_shift_strength: 1.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0
            || self.samples_per_view == 0
            || self.latent_dim == 0
            || self.feature_dim == 0
        {
            return Err(Error::Validation("generator counts must all be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Validation(format!(
                "noise_sigma must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.view_shift_strength >= 0.0) || !self.view_shift_strength.is_finite() {
            return Err(Error::Validation(format!(
                "view_shift_strength must be a finite value >= 0, got {}",
                self.view_shift_strength
            )));
        }
        Ok(())
    }
}

struct ViewMap {
    a: Vec<f64>, // feature_dim x latent_dim
    b: Vec<f64>,
}

/// Draws `z_i ~ N(0, I)` per identity and emits `A_v z_i + b_v + eps` per view.
///
/// `A_v = A_0 + shift * D_v` and `b_v = b_0 + shift * d_v`, so both views
/// coincide at zero shift. Entries of `A_0` and `D_v` have variance
/// `1/latent_dim`, keeping feature variance near one.
pub fn gen_synthetic(params: &GeneratorParams) -> Result<Dataset> {
    params.validate()?;
    let GeneratorParams {
        num_identities,
        samples_per_view,
        latent_dim,
        feature_dim,
        view_shift_strength: shift,
        noise_sigma,
        seed,
    } = *params;
    let mut rng = stream_rng(seed, Stream::Data);
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let normals = |n: usize, s: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let a0 = normals(feature_dim * latent_dim, scale, &mut rng);
    let b0 = normals(feature_dim, 1.0, &mut rng);
    let maps: Vec<ViewMap> = View::BOTH
        .iter()
        .map(|_| {
            let da = normals(feature_dim * latent_dim, scale, &mut rng);
            let db = normals(feature_dim, 1.0, &mut rng);
            ViewMap {
                a: a0.iter().zip(&da).map(|(x, d)| x + shift * d).collect(),
                b: b0.iter().zip(&db).map(|(x, d)| x + shift * d).collect(),
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(num_identities * samples_per_view * 2);
    for identity in 0..num_identities {
        let z = normals(latent_dim, 1.0, &mut rng);
        for (view, map) in View::BOTH.iter().zip(&maps) {
            for _ in 0..samples_per_view {
                let features = (0..feature_dim)
                    .map(|f| {
                        let row = &map.a[f * latent_dim..(f + 1) * latent_dim];
                        let clean: f64 = row.iter().zip(&z).map(|(a, z)| a * z).sum::<f64>() + map.b[f];
                        clean + noise_sigma * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                samples.push(Sample {
                    identity,
                    view: *view,
                    features,
                });
            }
        }
    }
    Ok(Dataset::new(samples, num_identities, feature_dim)?.with_generator(params.clone()))
}
