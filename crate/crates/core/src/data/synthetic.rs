//! Synthetic subjects from a class-dependent VAR(1) process
//! `x_t = G_c x_{t−1} + ε_t`, `ε_t ~ N(0, σ²I)`.
//!
//! The first `important` components carry a sparse directed coupling
//! pattern of weight `beta` that differs between the classes; every
//! component also has a self-loop `rho_self`. Each `G_c` is shrunk to
//! spectral radius at most `rho_max` so the process is stationary.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_dataset, write_matrix};
use super::{ComponentInfo, Dataset, Sample};
use crate::adcore::Array;
use crate::error::{Error, Result};

/// Names given to consecutive slices of the important components.
pub const DOMAIN_NAMES: [&str; 7] = ["SC", "AU", "SM", "VI", "CC", "DM", "CB"];
pub const NOISE_DOMAIN: &str = "noise";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub subjects_per_class: usize,
    pub components: usize,
    pub important: usize,
    pub timesteps: usize,
    pub beta: f64,
    pub sigma: f64,
    pub rho_self: f64,
    pub rho_max: f64,
    pub burn_in: usize,
    /// Fraction of ordered pairs of important components that are coupled.
    pub edge_density: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subjects_per_class: 100,
            components: 20,
            important: 8,
            timesteps: 100,
            beta: 0.35,
            sigma: 1.0,
            rho_self: 0.5,
            rho_max: 0.95,
            burn_in: 50,
            edge_density: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.subjects_per_class == 0 {
            return fail("subjects_per_class must be at least 1".into());
        }
        if self.components == 0 {
            return fail("components must be at least 1".into());
        }
        if self.important > self.components {
            return fail(format!(
                "important ({}) exceeds components ({})",
                self.important, self.components
            ));
        }
        if self.timesteps < 2 {
            return fail(format!("timesteps must be at least 2, got {}", self.timesteps));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.rho_max > 0.0 && self.rho_max < 1.0) {
            return fail(format!("rho_max must lie in (0, 1), got {}", self.rho_max));
        }
        if !self.beta.is_finite() || !self.rho_self.is_finite() {
            return fail("beta and rho_self must be finite".into());
        }
        if !(0.0..=0.5).contains(&self.edge_density) {
            return fail(format!("edge_density must lie in [0, 0.5], got {}", self.edge_density));
        }
        Ok(())
    }

    pub fn domains(&self) -> Vec<ComponentInfo> {
        (0..self.components)
            .map(|i| {
                if i < self.important {
                    ComponentInfo {
                        domain: DOMAIN_NAMES[i * DOMAIN_NAMES.len() / self.important].to_string(),
                        important: true,
                    }
                } else {
                    ComponentInfo {
                        domain: NOISE_DOMAIN.to_string(),
                        important: false,
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Coupling matrix per class, after the spectral-radius cap.
    /// `gtruth[c][(i, j)]` is the influence of `x_j(t−1)` on `x_i(t)`.
    pub gtruth: [Array; 2],
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(g: &Array) -> Result<f64> {
    if g.rows() != g.cols() {
        return Err(Error::Dimension {
            op: "spectral_radius",
            lhs: g.shape(),
            rhs: (g.cols(), g.rows()),
        });
    }
    let m = DMatrix::from_row_slice(g.rows(), g.cols(), g.data());
    Ok(m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

type Edges = Vec<(usize, usize)>;

/// Class patterns over the first `n` components. Class 0 is made of
/// `pairs` reciprocal pairs `i ⇄ j`. Class 1 keeps one direction of each
/// pair and adds as many new edges, all oriented along a random order of
/// the components so that its pattern has no cycles.
fn draw_patterns(
    rng: &mut ChaCha8Rng,
    n: usize,
    pairs: usize,
) -> (Edges, Edges) {
    let mut unordered: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    unordered.shuffle(rng);
    unordered.truncate(pairs);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut rank = vec![0; n];
    for (k, &c) in order.iter().enumerate() {
        rank[c] = k;
    }
    let forward = |(a, b): (usize, usize)| if rank[a] < rank[b] { (a, b) } else { (b, a) };

    let mut edges0: Vec<(usize, usize)> =
        unordered.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    edges0.sort_unstable();
    let mut edges1: Vec<(usize, usize)> = unordered.iter().map(|&p| forward(p)).collect();
    let mut fresh: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|p| !unordered.contains(p))
        .map(forward)
        .collect();
    fresh.shuffle(rng);
    fresh.truncate(pairs);
    edges1.extend(fresh);
    edges1.sort_unstable();
    (edges0, edges1)
}

fn coupling(spec: &SyntheticSpec, edges: &[(usize, usize)]) -> Result<Array> {
    let m = spec.components;
    let mut g = Array::zeros(m, m);
    for i in 0..m {
        g.set(i, i, spec.rho_self);
    }
    for &(i, j) in edges {
        g.set(i, j, spec.beta);
    }
    if g.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Config(
            "coupling matrix is zero; cannot rescale its spectral radius".into(),
        ));
    }
    let radius = spectral_radius(&g)?;
    if radius > spec.rho_max {
        g.scale_in_place(spec.rho_max / radius);
    }
    Ok(g)
}

/// Runs `burn_in + steps` VAR(1) updates from zero and keeps the last
/// `steps` states as an `m × steps` matrix.
pub fn simulate_var1<R: Rng>(
    g: &Array,
    steps: usize,
    burn_in: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Array> {
    let m = g.rows();
    let noise = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut state = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut out = Array::zeros(m, steps);
    for step in 0..burn_in + steps {
        for (i, slot) in next.iter_mut().enumerate() {
            let drift: f64 = g.row(i).iter().zip(&state).map(|(a, b)| a * b).sum();
            *slot = drift + noise.sample(rng);
        }
        std::mem::swap(&mut state, &mut next);
        if step >= burn_in {
            let t = step - burn_in;
            for (i, &v) in state.iter().enumerate() {
                out.set(i, t, v);
            }
        }
    }
    Ok(out)
}

/// Generates `2 · subjects_per_class` subjects (class 0 first) with ids
/// `sub0000`, `sub0001`, …, plus the per-class coupling matrices.
///
/// The edge budget is `edge_density` of the ordered pairs of important
/// components. Class 0 spends it on reciprocal pairs, which slow down the
/// coupled components; class 1 keeps half of those edges and spends the
/// rest on an acyclic pattern.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.important;
    let pairs = n * n.saturating_sub(1);
    let count = (spec.edge_density * pairs as f64).round() as usize;
    let count = if pairs > 0 { count.max(1) } else { 0 };
    let (edges0, edges1) = draw_patterns(&mut rng, n, count.div_ceil(2));

    let gtruth = [coupling(spec, &edges0)?, coupling(spec, &edges1)?];
    let mut samples = Vec::with_capacity(2 * spec.subjects_per_class);
    for (label, g) in gtruth.iter().enumerate() {
        for k in 0..spec.subjects_per_class {
            let x = simulate_var1(g, spec.timesteps, spec.burn_in, spec.sigma, &mut rng)?;
            samples.push(Sample {
                subject_id: format!("sub{:04}", label * spec.subjects_per_class + k),
                x,
                label,
            });
        }
    }
    let dataset = Dataset::new(samples, Some(spec.domains()))?;
    Ok(Synthetic { dataset, gtruth })
}

/// Writes the dataset plus `gtruth_class0.csv` and `gtruth_class1.csv`.
pub fn write_synthetic(synthetic: &Synthetic, dir: &Path) -> Result<()> {
    write_dataset(&synthetic.dataset, dir)?;
    for (c, g) in synthetic.gtruth.iter().enumerate() {
        write_matrix(&dir.join(format!("gtruth_class{c}.csv")), g)?;
    }
    Ok(())
}
