use super::{Descriptor, DescriptorKind, FeatureError};

/// Acceptance thresholds in the metric units of the descriptor variant.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchThresholds {
    pub th_low: f64,
    pub th_high: f64,
    pub ratio: f64,
}

pub const DEFAULT_RATIO: f64 = 0.9;
pub const DEFAULT_REAL_MULTIPLIER: f64 = 0.1;

impl MatchThresholds {
    pub fn new(th_low: f64, th_high: f64, ratio: f64) -> Result<Self, FeatureError> {
        if !(th_low > 0.0 && th_low <= th_high && th_high.is_finite()) {
            return Err(FeatureError::InvalidThresholds(format!(
                "need 0 < th_low <= th_high, got {th_low} and {th_high}"
            )));
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(FeatureError::InvalidThresholds(format!("ratio {ratio} outside (0, 1]")));
        }
        Ok(Self { th_low, th_high, ratio })
    }

    /// Hamming thresholds for the built-in 256-bit descriptor.
    pub fn binary_default() -> Self {
        Self {
            th_low: 50.0,
            th_high: 100.0,
            ratio: DEFAULT_RATIO,
        }
    }

    /// Dimensionless thresholds turned into Euclidean distances on unit-norm descriptors.
    pub fn real_scaled(th_low: f64, th_high: f64, multiplier: f64) -> Result<Self, FeatureError> {
        Self::new(th_low * multiplier, th_high * multiplier, DEFAULT_RATIO)
    }

    pub fn real_default() -> Self {
        Self::real_scaled(1.0, 2.0, DEFAULT_REAL_MULTIPLIER).expect("valid defaults")
    }

    pub fn for_kind(kind: DescriptorKind) -> Self {
        match kind {
            DescriptorKind::Binary(_) => Self::binary_default(),
            DescriptorKind::Real(_) => Self::real_default(),
        }
    }

    pub fn limit(&self, mode: MatchMode) -> f64 {
        match mode {
            MatchMode::Strict => self.th_low,
            MatchMode::Relaxed => self.th_high,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    Strict,
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Nearest and second-nearest distances plus the nearest index; ties keep the lower index.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BestTwo {
    pub index: usize,
    pub best: f64,
    pub second: f64,
}

impl BestTwo {
    pub(crate) fn empty() -> Self {
        Self {
            index: usize::MAX,
            best: f64::INFINITY,
            second: f64::INFINITY,
        }
    }

    #[inline]
    pub(crate) fn offer(&mut self, index: usize, d: f64) {
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.index = index;
        } else if d < self.second {
            self.second = d;
        }
    }

    /// Threshold and ratio acceptance of the nearest candidate.
    #[inline]
    pub(crate) fn passes(&self, limit: f64, ratio: f64) -> bool {
        self.index != usize::MAX && self.best <= limit && self.best < ratio * self.second
    }
}

/// Mutual-best matching with the distance threshold of `mode` and the ratio test applied
/// from both sides, so swapping the arguments only reverses the pairs.
pub fn match_descriptors(
    a: &[Descriptor],
    b: &[Descriptor],
    th: &MatchThresholds,
    mode: MatchMode,
) -> Result<Vec<Match>, FeatureError> {
    if let (Some(da), Some(db)) = (a.first(), b.first()) {
        if da.kind() != db.kind() {
            return Err(FeatureError::VariantMismatch(da.kind(), db.kind()));
        }
    }
    let mut from_a = vec![BestTwo::empty(); a.len()];
    let mut from_b = vec![BestTwo::empty(); b.len()];
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            let d = da.distance(db);
            from_a[i].offer(j, d);
            from_b[j].offer(i, d);
        }
    }
    let limit = th.limit(mode);
    let mut out = Vec::new();
    for (i, fa) in from_a.iter().enumerate() {
        if !fa.passes(limit, th.ratio) {
            continue;
        }
        let fb = &from_b[fa.index];
        if fb.index == i && fb.passes(limit, th.ratio) {
            out.push(Match {
                index_a: i,
                index_b: fa.index,
                distance: fa.best,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::BitDescriptor;
    use proptest::prelude::*;

    fn real(v: &[f32]) -> Descriptor {
        Descriptor::Real(v.to_vec())
    }

    #[test]
    fn identical_sets_match_identity() {
        let ds: Vec<_> = (0..5)
            .map(|i| {
                let mut v = [0.0f32; 5];
                v[i] = 1.0;
                real(&v)
            })
            .collect();
        let m = match_descriptors(&ds, &ds, &MatchThresholds::real_default(), MatchMode::Strict).unwrap();
        assert_eq!(m.len(), 5);
        for (k, mm) in m.iter().enumerate() {
            assert_eq!((mm.index_a, mm.index_b, mm.distance), (k, k, 0.0));
        }
    }

    #[test]
    fn equidistant_neighbours_rejected() {
        let a = vec![real(&[0.0, 0.0])];
        let b = vec![real(&[0.05, 0.0]), real(&[-0.05, 0.0])];
        let th = MatchThresholds::real_default();
        assert!(match_descriptors(&a, &b, &th, MatchMode::Relaxed).unwrap().is_empty());
    }

    #[test]
    fn variant_mismatch() {
        let a = vec![real(&[1.0])];
        let b = vec![Descriptor::Binary(BitDescriptor::zeros(8))];
        assert!(matches!(
            match_descriptors(&a, &b, &MatchThresholds::real_default(), MatchMode::Strict),
            Err(FeatureError::VariantMismatch(..))
        ));
    }

    #[test]
    fn thresholds_validated() {
        assert!(MatchThresholds::new(2.0, 1.0, 0.9).is_err());
        assert!(MatchThresholds::new(0.0, 1.0, 0.9).is_err());
        assert!(MatchThresholds::new(1.0, 1.0, 1.5).is_err());
        let t = MatchThresholds::real_default();
        assert!((t.th_low - 0.1).abs() < 1e-12 && (t.th_high - 0.2).abs() < 1e-12);
    }

    fn binary_set() -> impl Strategy<Value = Vec<Descriptor>> {
        prop::collection::vec(prop::array::uniform4(any::<u64>()), 0..25).prop_map(|ws| {
            ws.into_iter()
                .map(|w| {
                    let bytes: Vec<u8> = w.iter().flat_map(|x| x.to_le_bytes()).collect();
                    Descriptor::Binary(BitDescriptor::from_bytes(&bytes, 256))
                })
                .collect()
        })
    }

    fn flip_some(ds: &[Descriptor], seed: u64) -> Vec<Descriptor> {
        ds.iter()
            .enumerate()
            .map(|(k, d)| {
                let Descriptor::Binary(b) = d else { unreachable!() };
                let mut b = b.clone();
                for t in 0..((seed as usize + k) % 70) {
                    let i = (seed as usize * 31 + k * 17 + t * 7) % 256;
                    b.set(i, !b.get(i));
                }
                Descriptor::Binary(b)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn symmetric_one_to_one_and_nested(a in binary_set(), seed in 0u64..1000) {
            let b = flip_some(&a, seed);
            let th = MatchThresholds::new(60.0, 110.0, 0.95).unwrap();
            let ab = match_descriptors(&a, &b, &th, MatchMode::Relaxed).unwrap();
            let ba = match_descriptors(&b, &a, &th, MatchMode::Relaxed).unwrap();
            let mut fwd: Vec<_> = ab.iter().map(|m| (m.index_a, m.index_b)).collect();
            let mut rev: Vec<_> = ba.iter().map(|m| (m.index_b, m.index_a)).collect();
            fwd.sort();
            rev.sort();
            prop_assert_eq!(&fwd, &rev);
            let mut ia: Vec<_> = fwd.iter().map(|p| p.0).collect();
            let mut ib: Vec<_> = fwd.iter().map(|p| p.1).collect();
            ia.dedup();
            ib.sort();
            ib.dedup();
            prop_assert_eq!(ia.len(), fwd.len());
            prop_assert_eq!(ib.len(), fwd.len());
            let strict = match_descriptors(&a, &b, &th, MatchMode::Strict).unwrap();
            for m in strict {
                prop_assert!(fwd.contains(&(m.index_a, m.index_b)));
            }
        }
    }
}
