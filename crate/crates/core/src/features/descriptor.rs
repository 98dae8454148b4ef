/// Fixed-length bit string compared with the Hamming distance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitDescriptor {
    bits: usize,
    words: Vec<u64>,
}

impl BitDescriptor {
    pub fn zeros(bits: usize) -> Self {
        Self {
            bits,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    /// Unpacks `bits` bits stored least-significant-bit first.
    pub fn from_bytes(bytes: &[u8], bits: usize) -> Self {
        let mut d = Self::zeros(bits);
        for i in 0..bits {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                d.set(i, true);
            }
        }
        d
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.div_ceil(8)];
        for i in 0..self.bits {
            if self.get(i) {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        let mask = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn hamming(&self, other: &BitDescriptor) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DescriptorKind {
    Binary(usize),
    Real(usize),
}

impl DescriptorKind {
    pub fn len(self) -> usize {
        match self {
            DescriptorKind::Binary(n) | DescriptorKind::Real(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn variant_code(self) -> u8 {
        match self {
            DescriptorKind::Binary(_) => 0,
            DescriptorKind::Real(_) => 1,
        }
    }
}

/// Feature descriptor: binary (Hamming metric) or real-valued (Euclidean metric).
#[derive(Clone, Debug, PartialEq)]
pub enum Descriptor {
    Binary(BitDescriptor),
    Real(Vec<f32>),
}

impl Descriptor {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            Descriptor::Binary(b) => DescriptorKind::Binary(b.len()),
            Descriptor::Real(v) => DescriptorKind::Real(v.len()),
        }
    }

    /// Distance under the variant's metric. Mixed variants are infinitely far apart.
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> f64 {
        match (self, other) {
            (Descriptor::Binary(a), Descriptor::Binary(b)) => a.hamming(b) as f64,
            (Descriptor::Real(a), Descriptor::Real(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = (*x as f64) - (*y as f64);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            _ => f64::INFINITY,
        }
    }

    /// Scales real descriptors to unit L2 norm; binary descriptors are unchanged.
    pub fn l2_normalized(mut self) -> Self {
        if let Descriptor::Real(v) = &mut self {
            let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
        self
    }
}

/// Index of the descriptor minimizing the median distance to all others.
pub(crate) fn representative_index(descs: &[&Descriptor]) -> Option<usize> {
    if descs.is_empty() {
        return None;
    }
    let n = descs.len();
    let mut best = (0usize, f64::INFINITY);
    for i in 0..n {
        let mut d: Vec<f64> = (0..n).map(|j| descs[i].distance(descs[j])).collect();
        d.sort_by(|a, b| a.total_cmp(b));
        let median = d[(n - 1) / 2];
        if median < best.1 {
            best = (i, median);
        }
    }
    Some(best.0)
}
