//! Exemplar memory: a γ% subset of every finished site's training data,
//! replayed in later phases.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ContextSample;
use crate::error::{ItlError, Result};

/// Exemplars kept for a site with `site_train_size` training samples.
pub fn quota(gamma_percent: f64, site_train_size: usize) -> usize {
    if gamma_percent <= 0.0 {
        return 0;
    }
    ((gamma_percent / 100.0 * site_train_size as f64).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySite {
    pub site_id: String,
    pub exemplars: Vec<ContextSample>,
}

/// Append-only exemplar store; sites stay in insertion order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub gamma_percent: f64,
    pub selection_seed: u64,
    sites: Vec<MemorySite>,
}

/// Exemplars of one site drawn for a rehearsal step.
#[derive(Clone, Debug)]
pub struct RehearsalGroup<'a> {
    pub site_id: &'a str,
    pub exemplars: Vec<&'a ContextSample>,
}

/// Memory contents as `(case_id, slice_index)` references, for resuming an
/// experiment without copying pixel data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryManifest {
    pub gamma_percent: String,
    pub selection_seed: u64,
    pub sites: Vec<MemoryManifestSite>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryManifestSite {
    pub site_id: String,
    pub exemplars: Vec<(String, usize)>,
}

impl MemoryStore {
    pub fn new(gamma_percent: f64, selection_seed: u64) -> Result<Self> {
        if !(0.0..=100.0).contains(&gamma_percent) {
            return Err(ItlError::Config(format!("gamma_percent {gamma_percent} outside [0, 100]")));
        }
        Ok(Self {
            gamma_percent,
            selection_seed,
            sites: Vec::new(),
        })
    }

    pub fn sites(&self) -> &[MemorySite] {
        &self.sites
    }

    pub fn is_empty(&self) -> bool {
        self.sites.iter().all(|s| s.exemplars.is_empty())
    }

    /// Total number of stored exemplars.
    pub fn len(&self) -> usize {
        self.sites.iter().map(|s| s.exemplars.len()).sum()
    }

    pub fn contains(&self, site_id: &str) -> bool {
        self.sites.iter().any(|s| s.site_id == site_id)
    }

    /// Appends `quota(γ, |pool|)` exemplars drawn uniformly without
    /// replacement from `pool`, kept in pool order. Returns how many were
    /// stored.
    pub fn update<R: Rng + ?Sized>(&mut self, site_id: &str, pool: &[ContextSample], rng: &mut R) -> Result<usize> {
        if self.contains(site_id) {
            return Err(ItlError::DuplicateSite(site_id.to_string()));
        }
        if pool.is_empty() {
            return Err(ItlError::Empty(format!("no training samples to memorize for site {site_id}")));
        }
        let k = quota(self.gamma_percent, pool.len());
        let mut picked = index::sample(rng, pool.len(), k).into_vec();
        picked.sort_unstable();
        self.sites.push(MemorySite {
            site_id: site_id.to_string(),
            exemplars: picked.into_iter().map(|i| pool[i].clone()).collect(),
        });
        Ok(k)
    }

    /// Draws `batch_size` exemplars grouped by site. Slots are dealt to
    /// non-empty sites round-robin from a random starting site; within a site
    /// exemplars are drawn without replacement, cycling when a site holds
    /// fewer than it is dealt.
    pub fn sample_rehearsal_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<RehearsalGroup<'_>> {
        let live: Vec<&MemorySite> = self.sites.iter().filter(|s| !s.exemplars.is_empty()).collect();
        if live.is_empty() || batch_size == 0 {
            return Vec::new();
        }
        let start = rng.gen_range(0..live.len());
        let mut counts = vec![0usize; live.len()];
        for slot in 0..batch_size {
            counts[(start + slot) % live.len()] += 1;
        }
        live.iter()
            .zip(counts)
            .filter(|(_, c)| *c > 0)
            .map(|(site, c)| {
                let n = site.exemplars.len();
                let mut exemplars = Vec::with_capacity(c);
                while exemplars.len() < c {
                    let take = (c - exemplars.len()).min(n);
                    exemplars.extend(index::sample(rng, n, take).into_iter().map(|i| &site.exemplars[i]));
                }
                RehearsalGroup {
                    site_id: &site.site_id,
                    exemplars,
                }
            })
            .collect()
    }

    pub fn manifest(&self) -> MemoryManifest {
        MemoryManifest {
            gamma_percent: self.gamma_percent.to_string(),
            selection_seed: self.selection_seed,
            sites: self
                .sites
                .iter()
                .map(|s| MemoryManifestSite {
                    site_id: s.site_id.clone(),
                    exemplars: s.exemplars.iter().map(|e| (e.case_id.clone(), e.slice_index)).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a manifest, looking exemplars up in each site's
    /// training pool.
    pub fn from_manifest(manifest: &MemoryManifest, pools: &[(&str, &[ContextSample])]) -> Result<Self> {
        let gamma: f64 = manifest
            .gamma_percent
            .parse()
            .map_err(|_| ItlError::Config(format!("bad gamma_percent {}", manifest.gamma_percent)))?;
        let mut store = Self::new(gamma, manifest.selection_seed)?;
        for site in &manifest.sites {
            let pool = pools
                .iter()
                .find(|(id, _)| *id == site.site_id)
                .map(|(_, p)| *p)
                .ok_or_else(|| ItlError::Config(format!("no training pool for memorized site {}", site.site_id)))?;
            let exemplars = site
                .exemplars
                .iter()
                .map(|(case, k)| {
                    pool.iter()
                        .find(|s| &s.case_id == case && s.slice_index == *k)
                        .cloned()
                        .ok_or_else(|| {
                            ItlError::Config(format!("memorized slice {case}/{k} not in site {}", site.site_id))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            store.sites.push(MemorySite {
                site_id: site.site_id.clone(),
                exemplars,
            });
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugmentedInput, Spacing};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(site: &str, n: usize) -> Vec<ContextSample> {
        (0..n)
            .map(|i| ContextSample {
                site_id: site.to_string(),
                case_id: format!("{site}_c{}", i / 4),
                slice_index: i % 4,
                input: AugmentedInput {
                    height: 2,
                    width: 2,
                    data: vec![i as f32; 12],
                },
                mask: vec![(i % 2) as u8; 4],
                spacing: Spacing::isotropic_in_plane(1.0, 3.0),
            })
            .collect()
    }

    #[test]
    fn quota_examples() {
        assert_eq!(quota(5.0, 100), 5);
        assert_eq!(quota(1.0, 30), 1);
        assert_eq!(quota(0.0, 1000), 0);
        assert_eq!(quota(3.0, 50), 2);
        assert_eq!(quota(100.0, 7), 7);
    }

    #[test]
    fn update_appends_verbatim_exemplars() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = MemoryStore::new(5.0, 1).unwrap();
        let a = pool("A", 40);
        assert_eq!(store.update("A", &a, &mut rng).unwrap(), 2);
        assert_eq!(store.sites().len(), 1);
        for e in &store.sites()[0].exemplars {
            assert!(a.contains(e));
        }
        let before = store.sites()[0].clone();
        store.update("B", &pool("B", 60), &mut rng).unwrap();
        assert_eq!(store.sites()[0], before);
        assert_eq!(store.len(), 5);
        assert!(matches!(
            store.update("A", &a, &mut rng),
            Err(ItlError::DuplicateSite(_))
        ));
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let a = pool("A", 80);
        let run = |seed| {
            let mut s = MemoryStore::new(5.0, seed).unwrap();
            s.update("A", &a, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            serde_json::to_string(&s).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn rehearsal_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = MemoryStore::new(5.0, 0).unwrap();
        assert!(empty.sample_rehearsal_batch(5, &mut rng).is_empty());

        let mut one = MemoryStore::new(100.0, 0).unwrap();
        let a = pool("A", 5);
        one.update("A", &a, &mut rng).unwrap();
        let batch = one.sample_rehearsal_batch(5, &mut rng);
        assert_eq!(batch.len(), 1);
        let mut got: Vec<usize> = batch[0].exemplars.iter().map(|e| e.input.data[0] as usize).collect();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);

        let mut two = one.clone();
        two.update("B", &pool("B", 3), &mut rng).unwrap();
        let mut counts = [0usize; 2];
        for _ in 0..1000 {
            for g in two.sample_rehearsal_batch(5, &mut rng) {
                counts[usize::from(g.site_id == "B")] += g.exemplars.len();
            }
        }
        let (a, b) = (counts[0] as f64, counts[1] as f64);
        assert!((a - b).abs() / ((a + b) / 2.0) < 0.05, "{counts:?}");
    }

    #[test]
    fn zero_gamma_stores_sites_without_exemplars() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = MemoryStore::new(0.0, 0).unwrap();
        assert_eq!(store.update("A", &pool("A", 40), &mut rng).unwrap(), 0);
        assert!(store.is_empty());
        assert!(store.sample_rehearsal_batch(5, &mut rng).is_empty());
        assert!(MemoryStore::new(-1.0, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = MemoryStore::new(10.0, 9).unwrap();
        let (a, b) = (pool("A", 30), pool("B", 20));
        store.update("A", &a, &mut rng).unwrap();
        store.update("B", &b, &mut rng).unwrap();
        let text = serde_json::to_string(&store.manifest()).unwrap();
        let m: MemoryManifest = serde_json::from_str(&text).unwrap();
        let back = MemoryStore::from_manifest(&m, &[("A", &a), ("B", &b)]).unwrap();
        assert_eq!(back, store);
        assert!(MemoryStore::from_manifest(&m, &[("A", &a)]).is_err());
    }

    proptest! {
        #[test]
        fn memory_size_follows_quota_law(
            gamma in prop_oneof![Just(0.0), Just(1.0), Just(3.0), Just(5.0)],
            sizes in proptest::collection::vec(1usize..120, 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = MemoryStore::new(gamma, seed).unwrap();
            let mut expected = 0;
            for (i, &n) in sizes.iter().enumerate() {
                let site = format!("S{i}");
                store.update(&site, &pool(&site, n), &mut rng).unwrap();
                expected += quota(gamma, n);
                prop_assert_eq!(store.len(), expected);
            }
        }
    }
}
