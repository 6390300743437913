use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{node_coord, FieldSnapshot};
use crate::error::{Error, Result};

/// Fewest points an observation set may hold.
pub const MIN_OBSERVED: usize = 4;

/// Sparse field values at scattered coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub coords: Vec<[f64; 2]>,
    /// Row-major `[points, channels]`.
    pub values: Vec<f64>,
    pub channels: usize,
    /// Grid node index of each point, when taken from a snapshot.
    pub nodes: Vec<usize>,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Values of `snapshot` at the same nodes.
    pub fn values_from(&self, snapshot: &FieldSnapshot) -> Vec<f64> {
        let c = snapshot.channels;
        self.nodes.iter().flat_map(|&i| snapshot.values[i * c..(i + 1) * c].iter().copied()).collect()
    }

    /// Copy with `σ_rel·std_c·ε` added per entry, using `sign`·ε so that
    /// `sign = ±1` gives an antithetic pair.
    pub fn with_noise(&self, std: &[f64], sigma_rel: f64, seed: u64, sign: f64) -> Observations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sign * sigma_rel * std[i % self.channels] * e;
        }
        out
    }
}

/// Mask seed of trajectory `index` under run seed `seed`; shared by training
/// and evaluation so In-s/Ext-s stay disjoint from what the model saw.
pub fn observation_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(index as u64).wrapping_add(0x5851_F42D)
}

/// Seeded uniform subsample of `⌊ratio·N⌋` grid nodes (sorted by node
/// index) and the observed-node mask.
pub fn subsample(snapshot: &FieldSnapshot, ratio: f64, seed: u64) -> Result<(Observations, Vec<bool>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::contract(format!("subsampling ratio {ratio} outside (0, 1]")));
    }
    let total = snapshot.nodes();
    let n = (ratio * total as f64 + 1e-9).floor() as usize;
    if n < MIN_OBSERVED {
        return Err(Error::contract(format!(
            "ratio {ratio} keeps {n} of {total} points, need at least {MIN_OBSERVED}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = rand::seq::index::sample(&mut rng, total, n).into_vec();
    nodes.sort_unstable();
    let mut mask = vec![false; total];
    for &i in &nodes {
        mask[i] = true;
    }
    let (h, w) = (snapshot.height, snapshot.width);
    let coords = nodes
        .iter()
        .map(|&i| {
            let (x, y) = node_coord(i / w, i % w, h, w);
            [x, y]
        })
        .collect();
    let obs = Observations { coords, values: Vec::new(), channels: snapshot.channels, nodes };
    let values = obs.values_from(snapshot);
    Ok((Observations { values, ..obs }, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(h: usize, w: usize) -> FieldSnapshot {
        FieldSnapshot::from_fn(h, w, 2, |x, y| vec![x, y * 2.0]).unwrap()
    }

    #[test]
    fn full_ratio_observes_everything() {
        let (obs, mask) = subsample(&snap(8, 8), 1.0, 3).unwrap();
        assert_eq!(obs.len(), 64);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn quarter_of_32x32_is_256_points() {
        let (obs, mask) = subsample(&snap(32, 32), 0.25, 1).unwrap();
        assert_eq!(obs.len(), 256);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 256);
        assert_eq!(obs.values.len(), 512);
    }

    #[test]
    fn same_seed_same_mask() {
        let s = snap(16, 16);
        assert_eq!(subsample(&s, 0.5, 9).unwrap(), subsample(&s, 0.5, 9).unwrap());
        assert_ne!(subsample(&s, 0.5, 9).unwrap().1, subsample(&s, 0.5, 10).unwrap().1);
    }

    #[test]
    fn values_and_coords_follow_the_nodes() {
        let s = snap(8, 4);
        let (obs, _) = subsample(&s, 0.5, 2).unwrap();
        for (k, &i) in obs.nodes.iter().enumerate() {
            let (x, y) = s.coord(i / 4, i % 4);
            assert_eq!(obs.coords[k], [x, y]);
            assert_eq!(obs.values[2 * k], s.at(i / 4, i % 4, 0));
            assert_eq!(obs.values[2 * k + 1], s.at(i / 4, i % 4, 1));
        }
    }

    #[test]
    fn too_few_points_or_bad_ratio_rejected() {
        assert!(matches!(subsample(&snap(4, 4), 0.2, 0), Err(Error::Contract(_))));
        assert!(matches!(subsample(&snap(4, 4), 0.0, 0), Err(Error::Contract(_))));
        assert!(matches!(subsample(&snap(4, 4), 1.5, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn antithetic_noise_cancels() {
        let (obs, _) = subsample(&snap(8, 8), 0.5, 4).unwrap();
        let a = obs.with_noise(&[1.0, 2.0], 0.1, 7, 1.0);
        let b = obs.with_noise(&[1.0, 2.0], 0.1, 7, -1.0);
        for ((x, y), z) in a.values.iter().zip(&b.values).zip(&obs.values) {
            assert!(((x + y) / 2.0 - z).abs() < 1e-12);
        }
        assert_eq!(obs.with_noise(&[1.0, 2.0], 0.0, 7, 1.0), obs);
    }
}
