//! Mixed-variable sizing parameter space: continuous, quantized, and integer
//! parameters, plus the encode/decode mapping onto the unit cube used by the
//! surrogate models.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("inverted bounds for `{0}`: lo must be below hi")]
    InvertedBounds(String),
    #[error("step of `{0}` must be positive and divide (hi - lo)")]
    BadStep(String),
    #[error("integer bounds of `{0}` must be whole numbers")]
    NonIntegerBounds(String),
    #[error("a parameter space needs at least one parameter")]
    Empty,
    #[error("configuration has {got} values but the space has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} of `{name}` is outside bounds or off the grid")]
    IllegalValue { name: String, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParameterKind {
    Continuous { lo: f64, hi: f64 },
    Quantized { lo: f64, hi: f64, step: f64 },
    Integer { lo: f64, hi: f64 },
}

impl ParameterKind {
    pub fn lo(&self) -> f64 {
        match *self {
            ParameterKind::Continuous { lo, .. }
            | ParameterKind::Quantized { lo, .. }
            | ParameterKind::Integer { lo, .. } => lo,
        }
    }

    pub fn hi(&self) -> f64 {
        match *self {
            ParameterKind::Continuous { hi, .. }
            | ParameterKind::Quantized { hi, .. }
            | ParameterKind::Integer { hi, .. } => hi,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi() - self.lo()
    }

    /// Grid spacing for discrete kinds, `None` for continuous.
    pub fn step(&self) -> Option<f64> {
        match *self {
            ParameterKind::Continuous { .. } => None,
            ParameterKind::Quantized { step, .. } => Some(step),
            ParameterKind::Integer { .. } => Some(1.0),
        }
    }

    /// Number of grid points for discrete kinds, `None` for continuous.
    pub fn grid_count(&self) -> Option<usize> {
        self.step()
            .map(|s| ((self.width() / s).round() as usize) + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParameterKind,
    #[serde(default)]
    pub units: String,
}

impl ParameterSpec {
    pub fn continuous(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParameterKind::Continuous { lo, hi },
            units: String::new(),
        }
    }

    pub fn quantized(name: &str, lo: f64, hi: f64, step: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParameterKind::Quantized { lo, hi, step },
            units: String::new(),
        }
    }

    pub fn integer(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParameterKind::Integer { lo, hi },
            units: String::new(),
        }
    }

    fn validate(&self) -> Result<(), SpaceError> {
        let (lo, hi) = (self.kind.lo(), self.kind.hi());
        match self.kind {
            ParameterKind::Continuous { .. } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(SpaceError::InvertedBounds(self.name.clone()));
                }
            }
            ParameterKind::Quantized { step, .. } => {
                // lo == hi is a legal singleton grid.
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(SpaceError::InvertedBounds(self.name.clone()));
                }
                if !(step > 0.0) || !step.is_finite() {
                    return Err(SpaceError::BadStep(self.name.clone()));
                }
                let n = (hi - lo) / step;
                if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
                    return Err(SpaceError::BadStep(self.name.clone()));
                }
            }
            ParameterKind::Integer { .. } => {
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(SpaceError::InvertedBounds(self.name.clone()));
                }
                if lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(SpaceError::NonIntegerBounds(self.name.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Clamp a raw value into the spec's domain; discrete kinds round to the
/// nearest grid point with ties rounding up. Idempotent.
pub fn snap(value: f64, spec: &ParameterSpec) -> f64 {
    let lo = spec.kind.lo();
    let hi = spec.kind.hi();
    let v = value.clamp(lo, hi);
    match spec.kind.step() {
        None => v,
        Some(step) => {
            let k = ((v - lo) / step + 0.5).floor();
            let k = k.clamp(0.0, (hi - lo) / step);
            lo + k * step
        }
    }
}

/// One assignment of every parameter in a space, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub values: Vec<f64>,
}

impl Configuration {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    specs: Vec<ParameterSpec>,
}

impl ParameterSpace {
    pub fn new(specs: Vec<ParameterSpec>) -> Result<Self, SpaceError> {
        if specs.is_empty() {
            return Err(SpaceError::Empty);
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if specs[..i].iter().any(|t| t.name == s.name) {
                return Err(SpaceError::DuplicateName(s.name.clone()));
            }
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[ParameterSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Configuration {
        let values = self
            .specs
            .iter()
            .map(|s| {
                let lo = s.kind.lo();
                let hi = s.kind.hi();
                match s.kind.step() {
                    None => rng.random_range(lo..hi),
                    Some(step) => {
                        let n = s.kind.grid_count().unwrap();
                        lo + rng.random_range(0..n) as f64 * step
                    }
                }
            })
            .collect();
        Configuration::new(values)
    }

    pub fn validate_config(&self, config: &Configuration) -> Result<(), SpaceError> {
        if config.values.len() != self.specs.len() {
            return Err(SpaceError::LengthMismatch {
                expected: self.specs.len(),
                got: config.values.len(),
            });
        }
        for (v, s) in config.values.iter().zip(&self.specs) {
            if (snap(*v, s) - v).abs() > 1e-9 {
                return Err(SpaceError::IllegalValue {
                    name: s.name.clone(),
                    value: *v,
                });
            }
        }
        Ok(())
    }

    /// Affine map of each coordinate onto [0, 1]. Singleton domains map to 0.
    pub fn encode(&self, config: &Configuration) -> Result<Vec<f64>, SpaceError> {
        if config.values.len() != self.specs.len() {
            return Err(SpaceError::LengthMismatch {
                expected: self.specs.len(),
                got: config.values.len(),
            });
        }
        Ok(config
            .values
            .iter()
            .zip(&self.specs)
            .map(|(v, s)| {
                let w = s.kind.width();
                if w > 0.0 {
                    (v - s.kind.lo()) / w
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Inverse of `encode` followed by `snap`, so any point of the unit cube
    /// decodes to a legal configuration.
    pub fn decode(&self, encoded: &[f64]) -> Result<Configuration, SpaceError> {
        if encoded.len() != self.specs.len() {
            return Err(SpaceError::LengthMismatch {
                expected: self.specs.len(),
                got: encoded.len(),
            });
        }
        let values = encoded
            .iter()
            .zip(&self.specs)
            .map(|(u, s)| snap(s.kind.lo() + u * s.kind.width(), s))
            .collect();
        Ok(Configuration::new(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn validates_single_continuous() {
        let s = ParameterSpace::new(vec![ParameterSpec::continuous("w1", 0.4, 8.0)]).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn quantized_grid_count() {
        let s = ParameterSpec::quantized("nf", 1.0, 16.0, 1.0);
        assert_eq!(s.kind.grid_count(), Some(16));
        ParameterSpace::new(vec![s]).unwrap();
    }

    #[test]
    fn rejects_inverted_bounds() {
        let err = ParameterSpace::new(vec![ParameterSpec::continuous("w", 5.0, 2.0)]).unwrap_err();
        assert_eq!(err, SpaceError::InvertedBounds("w".into()));
    }

    #[test]
    fn rejects_duplicate_names() {
        let err = ParameterSpace::new(vec![
            ParameterSpec::continuous("w", 0.0, 1.0),
            ParameterSpec::integer("w", 1.0, 4.0),
        ])
        .unwrap_err();
        assert_eq!(err, SpaceError::DuplicateName("w".into()));
    }

    #[test]
    fn rejects_non_dividing_step() {
        let err =
            ParameterSpace::new(vec![ParameterSpec::quantized("q", 0.0, 1.0, 0.3)]).unwrap_err();
        assert_eq!(err, SpaceError::BadStep("q".into()));
    }

    #[test]
    fn snap_examples() {
        assert_eq!(snap(7.6, &ParameterSpec::integer("n", 1.0, 16.0)), 8.0);
        // tie rounds up
        assert_eq!(snap(2.5, &ParameterSpec::quantized("q", 0.0, 10.0, 1.0)), 3.0);
        assert_eq!(snap(-3.0, &ParameterSpec::continuous("w", 0.4, 8.0)), 0.4);
    }

    #[test]
    fn singleton_integer_always_lo() {
        let space = ParameterSpace::new(vec![ParameterSpec::integer("n", 1.0, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(space.sample_uniform(&mut rng).values, vec![1.0]);
        }
    }

    #[test]
    fn uniform_mean_of_continuous() {
        let space = ParameterSpace::new(vec![ParameterSpec::continuous("x", 0.0, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let sum: f64 = (0..n)
            .map(|_| space.sample_uniform(&mut rng).values[0])
            .sum();
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn quantized_draws_stay_on_grid_and_cover_it() {
        let space =
            ParameterSpace::new(vec![ParameterSpec::quantized("q", 0.0, 10.0, 5.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            let v = space.sample_uniform(&mut rng).values[0];
            assert!(v == 0.0 || v == 5.0 || v == 10.0);
            counts[(v / 5.0) as usize] += 1;
        }
        // chi-square sanity against uniform over 3 cells, df = 2;
        // threshold at p = 0.001 is 13.82
        let expected = 100_000.0 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.82, "chi2 = {chi2}");
    }

    #[test]
    fn encode_maps_bounds() {
        let space = ParameterSpace::new(vec![ParameterSpec::integer("n", 1.0, 16.0)]).unwrap();
        assert_eq!(space.encode(&Configuration::new(vec![1.0])).unwrap(), vec![0.0]);
        assert_eq!(space.encode(&Configuration::new(vec![16.0])).unwrap(), vec![1.0]);
        let e = space.encode(&Configuration::new(vec![8.0])).unwrap();
        assert!((e[0] - 7.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn encode_length_mismatch() {
        let space = ParameterSpace::new(vec![ParameterSpec::continuous("x", 0.0, 1.0)]).unwrap();
        assert!(matches!(
            space.encode(&Configuration::new(vec![0.1, 0.2])),
            Err(SpaceError::LengthMismatch { .. })
        ));
    }

    fn test_space() -> ParameterSpace {
        ParameterSpace::new(vec![
            ParameterSpec::continuous("w", 0.4, 8.0),
            ParameterSpec::quantized("q", 0.0, 10.0, 2.5),
            ParameterSpec::integer("n", 1.0, 16.0),
        ])
        .unwrap()
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(seed in 0u64..500) {
            let space = test_space();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = space.sample_uniform(&mut rng);
            let enc = space.encode(&c).unwrap();
            let back = space.decode(&enc).unwrap();
            // continuous values round-trip to float precision; discrete ones
            // land back on the identical grid point
            for (spec, (b, v)) in space.specs().iter().zip(back.values.iter().zip(&c.values)) {
                match spec.kind {
                    ParameterKind::Continuous { .. } => {
                        prop_assert!((b - v).abs() <= 1e-12 * v.abs().max(1.0))
                    }
                    _ => prop_assert_eq!(b, v),
                }
            }
        }

        #[test]
        fn snap_is_idempotent(v in -20.0f64..20.0) {
            for spec in test_space().specs() {
                let once = snap(v, spec);
                prop_assert_eq!(snap(once, spec), once);
            }
        }
    }
}
