//! Themed synthetic bundling data with Zipf-skewed popularity.
//!
//! Items are dealt round-robin into themes. Popularity is a random
//! permutation independent of themes, so content features (theme centroid
//! plus noise) carry bundle signal that popularity does not.
//!
//! A bundle picks a theme, then an anchor drawn by popularity, then fills
//! the rest from the theme. With the default weights the anchor leans
//! popular and the complements are uniform, so niche items show up in
//! bundles far more often than in user histories.

use super::{Bundle, BundleTable, Dataset, IdMap, InteractionMatrix, ItemCorpus};
use crate::error::{Error, Result};
use crate::numerics::{SplitMix64, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_bundles: usize,
    /// Inclusive bundle size bounds.
    pub bundle_size: (usize, usize),
    pub zipf_exponent: f64,
    pub d_t: usize,
    pub d_m: usize,
    pub n_themes: usize,
    /// Inclusive per-user interaction count bounds.
    pub user_items: (usize, usize),
    /// Probability that a user's draw comes from their favourite theme.
    pub theme_affinity: f64,
    pub text_noise: f64,
    pub media_noise: f64,
    /// Exponent on the popularity weight when filling bundles; 0 picks theme
    /// members uniformly.
    pub bundle_popularity: f64,
    /// Exponent on the popularity weight of each bundle's first item, its
    /// anchor; the remaining items follow `bundle_popularity`.
    pub anchor_popularity: f64,
    /// Scale every text and media row to unit length, as pretrained
    /// encoders usually do.
    pub unit_features: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 500,
            n_users: 2000,
            n_bundles: 1500,
            bundle_size: (2, 4),
            zipf_exponent: 1.2,
            d_t: 32,
            d_m: 32,
            n_themes: 25,
            user_items: (3, 15),
            theme_affinity: 0.3,
            text_noise: 1.1,
            media_noise: 1.1,
            bundle_popularity: 0.0,
            anchor_popularity: 1.0,
            unit_features: true,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.bundle_size;
        if self.n_items < 2 || self.n_users == 0 || self.n_bundles == 0 {
            return bad("synthetic corpus needs >= 2 items, >= 1 user and >= 1 bundle".into());
        }
        if lo < 2 || hi < lo {
            return bad(format!("bundle size range ({lo}, {hi}) must satisfy 2 <= lo <= hi"));
        }
        if self.n_themes == 0 || self.n_themes > self.n_items {
            return bad(format!("n_themes must be in 1..={}", self.n_items));
        }
        if self.n_items / self.n_themes < hi {
            return bad(format!(
                "themes hold {} items, fewer than the largest bundle ({hi})",
                self.n_items / self.n_themes
            ));
        }
        let (ulo, uhi) = self.user_items;
        if ulo == 0 || uhi < ulo || uhi > self.n_items {
            return bad(format!("user interaction range ({ulo}, {uhi}) is infeasible"));
        }
        if self.d_t == 0 || self.d_m == 0 {
            return bad("feature widths must be >= 1".into());
        }
        if !(self.zipf_exponent >= 0.0) || !(0.0..=1.0).contains(&self.theme_affinity) {
            return bad("zipf_exponent must be >= 0 and theme_affinity in [0, 1]".into());
        }
        if !(self.bundle_popularity >= 0.0 && self.anchor_popularity >= 0.0) {
            return bad("bundle_popularity and anchor_popularity must be >= 0".into());
        }
        if !(self.text_noise >= 0.0 && self.media_noise >= 0.0) {
            return bad("feature noise must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Latent theme of every item.
    pub themes: Vec<usize>,
    /// Latent popularity rank of every item (0 = heaviest Zipf weight).
    pub latent_rank: Vec<usize>,
}

/// Cumulative weights for sampling by binary search.
struct Cdf {
    items: Vec<usize>,
    cum: Vec<f64>,
}

impl Cdf {
    fn new(items: Vec<usize>, weight: &[f64]) -> Self {
        let mut acc = 0.0;
        let cum = items
            .iter()
            .map(|&i| {
                acc += weight[i];
                acc
            })
            .collect();
        Self { items, cum }
    }

    fn draw(&self, rng: &mut SplitMix64) -> usize {
        let total = *self.cum.last().expect("non-empty pool");
        let u = rng.next_f64() * total;
        let pos = self.cum.partition_point(|&c| c <= u).min(self.items.len() - 1);
        self.items[pos]
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n = cfg.n_items;
    let mut rng = SplitMix64::new(cfg.seed);

    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut themes = vec![0; n];
    for (k, &i) in perm.iter().enumerate() {
        themes[i] = k % cfg.n_themes;
    }
    let mut members = vec![Vec::new(); cfg.n_themes];
    for i in 0..n {
        members[themes[i]].push(i);
    }

    let mut latent_rank: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut latent_rank);
    let weight: Vec<f64> = latent_rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.zipf_exponent))
        .collect();
    let global = Cdf::new((0..n).collect(), &weight);
    let per_theme: Vec<Cdf> = members.iter().map(|m| Cdf::new(m.clone(), &weight)).collect();

    let mut pairs = Vec::new();
    let mut taken = vec![false; n];
    for u in 0..cfg.n_users {
        let favourite = rng.below(cfg.n_themes);
        let (lo, hi) = cfg.user_items;
        let k = lo + rng.below(hi - lo + 1);
        let mut chosen = Vec::with_capacity(k);
        while chosen.len() < k {
            let pool = if rng.next_f64() < cfg.theme_affinity {
                &per_theme[favourite]
            } else {
                &global
            };
            let mut pick = None;
            for _ in 0..64 {
                let i = pool.draw(&mut rng);
                if !taken[i] {
                    pick = Some(i);
                    break;
                }
            }
            // A saturated theme pool falls back to the global one.
            let i = match pick {
                Some(i) => i,
                None => loop {
                    let i = global.draw(&mut rng);
                    if !taken[i] {
                        break i;
                    }
                },
            };
            taken[i] = true;
            chosen.push(i);
        }
        for &i in &chosen {
            taken[i] = false;
            pairs.push((u, i));
        }
    }
    let interactions = InteractionMatrix::from_pairs(cfg.n_users, n, &pairs)?;

    let anchor_weight: Vec<f64> = weight.iter().map(|w| w.powf(cfg.anchor_popularity)).collect();
    let bundle_weight: Vec<f64> = weight.iter().map(|w| w.powf(cfg.bundle_popularity)).collect();
    let (blo, bhi) = cfg.bundle_size;
    let mut bundles = Vec::with_capacity(cfg.n_bundles);
    for b in 0..cfg.n_bundles {
        let theme = rng.below(cfg.n_themes);
        let size = blo + rng.below(bhi - blo + 1);
        let mut pool = members[theme].clone();
        let mut items = Vec::with_capacity(size);
        if cfg.anchor_popularity != 0.0 {
            items.extend(weighted_sample(&pool, &anchor_weight, 1, &mut rng));
            pool.retain(|&i| i != items[0]);
        }
        if cfg.bundle_popularity == 0.0 {
            rng.shuffle(&mut pool);
            pool.truncate(size - items.len());
            items.extend(pool);
        } else {
            items.extend(weighted_sample(&pool, &bundle_weight, size - items.len(), &mut rng));
        }
        bundles.push(Bundle {
            id: format!("b{b}"),
            items,
        });
    }
    let bundles = BundleTable::new(bundles, n)?;

    let mut text = themed_features(&themes, cfg.n_themes, cfg.d_t, cfg.text_noise, &mut rng);
    let mut media = themed_features(&themes, cfg.n_themes, cfg.d_m, cfg.media_noise, &mut rng);
    if cfg.unit_features {
        normalize_rows(&mut text);
        normalize_rows(&mut media);
    }
    let ids = IdMap::from_external((0..n).map(|i| format!("i{i}")).collect())?;
    let users = IdMap::from_external((0..cfg.n_users).map(|u| format!("u{u}")).collect())?;
    Ok(SynthOutput {
        dataset: Dataset {
            corpus: ItemCorpus::new(ids, text, media)?,
            bundles,
            interactions,
            users,
        },
        themes,
        latent_rank,
    })
}

/// `k` distinct members drawn in proportion to `weight`.
fn weighted_sample(members: &[usize], weight: &[f64], k: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut pool = members.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|&i| weight[i]).sum();
        let mut u = rng.next_f64() * total;
        let mut pos = pool.len() - 1;
        for (p, &i) in pool.iter().enumerate() {
            if u < weight[i] {
                pos = p;
                break;
            }
            u -= weight[i];
        }
        out.push(pool.swap_remove(pos));
    }
    out
}

fn normalize_rows(t: &mut Tensor<f32>) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

fn themed_features(
    themes: &[usize],
    n_themes: usize,
    dim: usize,
    noise: f64,
    rng: &mut SplitMix64,
) -> Tensor<f32> {
    let centroids: Vec<f64> = (0..n_themes * dim).map(|_| rng.normal()).collect();
    let mut out = Tensor::zeros(themes.len(), dim);
    for (i, &t) in themes.iter().enumerate() {
        for (c, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (centroids[t * dim + c] + noise * rng.normal()) as f32;
        }
    }
    out
}
