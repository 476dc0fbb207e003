use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::World;
use crate::features::{Descriptor, DescriptorData, FamilyId};

/// Illumination behaviour of one emulated descriptor family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyPreset {
    pub family: FamilyId,
    /// Descriptor response to illumination; lower is more invariant.
    pub sensitivity_scale: f64,
    /// A landmark is not re-detected when its per-family draw falls below
    /// `dropout_slope · |level − reference_level|`.
    pub dropout_slope: f64,
    /// Per-observation noise: standard deviation for real families, bit
    /// flip probability for binary ones.
    pub noise: f64,
}

impl FamilyPreset {
    pub fn new(family: FamilyId, sensitivity_scale: f64, dropout_slope: f64, noise: f64) -> Self {
        Self {
            family,
            sensitivity_scale,
            dropout_slope,
            noise,
        }
    }

    pub fn for_family(family: FamilyId) -> Self {
        use FamilyId::*;
        match family {
            Surf => Self::new(family, 1.9, 1.3, 0.15),
            Sift => Self::new(family, 1.8, 1.3, 0.15),
            Brief => Self::new(family, 2.4, 1.6, 0.03),
            Brisk => Self::new(family, 2.2, 1.55, 0.035),
            Kaze => Self::new(family, 1.6, 1.25, 0.15),
            Freak => Self::new(family, 2.5, 1.6, 0.035),
            Daisy => Self::new(family, 1.7, 1.3, 0.15),
            SuperPoint => Self::new(family, 0.6, 1.1, 0.15),
        }
    }

    pub fn all() -> Vec<FamilyPreset> {
        FamilyId::ALL.into_iter().map(Self::for_family).collect()
    }
}

#[derive(Debug, Clone)]
enum Appearance {
    Real { base: Vec<f32>, direction: Vec<f32> },
    Binary { base: Vec<u64>, flip_draw: Vec<f32> },
}

/// Per-landmark descriptor model of one family in one world.
#[derive(Debug, Clone)]
pub struct FamilyModel {
    pub preset: FamilyPreset,
    appearance: Vec<Appearance>,
    dropout_draw: Vec<f64>,
}

fn family_salt(f: FamilyId) -> u64 {
    (FamilyId::ALL.iter().position(|x| *x == f).unwrap() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl FamilyModel {
    pub fn new(world: &World, preset: &FamilyPreset) -> Self {
        let fam = preset.family;
        let dim = fam.dimension();
        let salt = family_salt(fam);
        let mut appearance = Vec::with_capacity(world.landmarks.len());
        let mut dropout_draw = Vec::with_capacity(world.landmarks.len());
        for l in &world.landmarks {
            let mut rng = ChaCha8Rng::seed_from_u64(l.appearance_seed ^ salt);
            dropout_draw.push(rng.random_range(0.0..1.0));
            if let Some(c) = l.texture_class {
                let class_seed = world.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (c as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93);
                rng = ChaCha8Rng::seed_from_u64(class_seed ^ salt);
            }
            appearance.push(if fam.is_binary() {
                let mut base = vec![0u64; dim.div_ceil(64)];
                for (i, w) in base.iter_mut().enumerate() {
                    let bits = (dim - 64 * i).min(64);
                    let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
                    *w = rng.random::<u64>() & mask;
                }
                Appearance::Binary {
                    base,
                    flip_draw: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                }
            } else {
                let base = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let direction = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                Appearance::Real { base, direction }
            });
        }
        Self {
            preset: *preset,
            appearance,
            dropout_draw,
        }
    }

    pub fn family(&self) -> FamilyId {
        self.preset.family
    }

    /// Deterministic illumination dropout of landmark `l` at `level`.
    pub fn redetected(&self, world: &World, l: usize, level: f64) -> bool {
        let spec = &world.landmarks[l];
        self.dropout_draw[l] >= self.preset.dropout_slope * (level - spec.reference_level).abs()
    }

    fn shift(&self, world: &World, l: usize, level: f64) -> f64 {
        level * self.preset.sensitivity_scale * world.landmarks[l].gain
    }

    fn flip_threshold(&self, world: &World, l: usize, level: f64) -> f32 {
        (0.25 * self.shift(world, l, level)).min(0.5) as f32
    }

    /// Descriptor of landmark `l` at illumination `level`, with observation
    /// noise when `rng` is given.
    pub fn descriptor(&self, world: &World, l: usize, level: f64, rng: Option<&mut ChaCha8Rng>) -> Descriptor {
        let fam = self.family();
        let data = match &self.appearance[l] {
            Appearance::Real { base, direction } => {
                let s = self.shift(world, l, level) as f32;
                let mut v: Vec<f32> = base.iter().zip(direction).map(|(b, d)| b + d * s).collect();
                if let Some(rng) = rng {
                    let sigma = self.preset.noise as f32;
                    for x in &mut v {
                        let n: f32 = StandardNormal.sample(rng);
                        *x += sigma * n;
                    }
                }
                DescriptorData::Real(v)
            }
            Appearance::Binary { base, flip_draw } => {
                let tau = self.flip_threshold(world, l, level);
                let mut words = base.clone();
                for (k, &u) in flip_draw.iter().enumerate() {
                    if u < tau {
                        words[k / 64] ^= 1 << (k % 64);
                    }
                }
                if let Some(rng) = rng {
                    for k in 0..flip_draw.len() {
                        if rng.random_bool(self.preset.noise.clamp(0.0, 1.0)) {
                            words[k / 64] ^= 1 << (k % 64);
                        }
                    }
                }
                DescriptorData::Binary(words)
            }
        };
        Descriptor::from_data(fam, data)
    }

    /// Noise-free descriptor distance of landmark `l` between two times.
    pub fn noiseless_descriptor_distance(&self, world: &World, l: usize, t0: f64, t1: f64) -> f64 {
        let a = self.descriptor(world, l, world.schedule.global_level(t0), None);
        let b = self.descriptor(world, l, world.schedule.global_level(t1), None);
        crate::features::descriptor_distance(&a, &b).unwrap()
    }
}
