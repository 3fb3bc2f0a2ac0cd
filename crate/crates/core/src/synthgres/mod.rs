//! Procedural GRES datasets: grid scenes, templated expressions, masks,
//! per-category count labels and existence flags.
//!
//! On disk a dataset is `dataset.json` plus the `vocab.json` it points to:
//!
//! ```text
//! {"meta": {"grid_hw": [H, W], "C": 4, "seed": 0, "vocab_ref": "vocab.json", ...},
//!  "samples": [{"image_id": 0, "grid": [...H·W cell ids...], "tokens": [...],
//!               "text": "...", "mask_rle": [...], "counts": [...C...], "exist": 1,
//!               "polarity": "positive", "scenario": "multi", "template": "category"}]}
//! ```
//!
//! Cell ids are `1 + category·n_colors + color`; masks are column-major RLE
//! starting with a zero run.

pub mod grammar;
pub mod rle;
pub mod scene;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grammar::{Direction, Expression, TemplateKind, Vocab, COLORS, SHAPES};
pub use rle::{rle_decode, rle_encode};
pub use scene::{cell_class, Instance, Scene, Size};

use crate::config::GenConfig;
use crate::error::{Error, Result};
use crate::metrics::Polarity;
use crate::toyenc::Grid;

/// Scene retries before an unsatisfiable expression slot is skipped.
pub const MAX_RETRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Multi,
    Single,
    None,
}

impl Scenario {
    pub fn of_count(n: usize) -> Self {
        match n {
            0 => Scenario::None,
            1 => Scenario::Single,
            _ => Scenario::Multi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub grid_hw: (usize, usize),
    #[serde(rename = "C")]
    pub n_categories: usize,
    pub seed: u64,
    pub vocab_ref: String,
    pub n_colors: usize,
    pub n_cell_classes: usize,
    pub categories: Vec<String>,
    pub n_images: usize,
    pub expr_per_image: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: u64,
    pub grid: Vec<u16>,
    pub tokens: Vec<usize>,
    pub text: String,
    pub mask_rle: Vec<usize>,
    pub counts: Vec<u32>,
    pub exist: u8,
    pub polarity: Polarity,
    pub scenario: Scenario,
    pub template: TemplateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub vocab: Option<Vocab>,
}

/// One decoded, validated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GresSample {
    pub image_id: u64,
    pub grid: Grid,
    pub tokens: Vec<usize>,
    pub text: String,
    pub gt_mask: Vec<u8>,
    pub gt_counts: Vec<f64>,
    pub gt_exist: u8,
    pub polarity: Polarity,
    pub scenario: Scenario,
}

/// SplitMix64 finaliser of `(seed, image_id)`; the per-image generator seed.
pub fn image_seed(seed: u64, image_id: u64) -> u64 {
    let mut z = seed ^ image_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn validate_gen(cfg: &GenConfig) -> Result<()> {
    if cfg.n_categories < 2 || cfg.n_categories > SHAPES.len() {
        return Err(Error::Config(format!("C = {} must lie in 2..={}", cfg.n_categories, SHAPES.len())));
    }
    if cfg.n_colors == 0 || cfg.n_colors > COLORS.len() {
        return Err(Error::Config(format!("n_colors = {} must lie in 1..={}", cfg.n_colors, COLORS.len())));
    }
    let (h, w) = cfg.grid_hw;
    if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!("grid {h}×{w} must be positive multiples of 8")));
    }
    let (lo, hi) = cfg.instances_per_image;
    if lo == 0 || lo > hi || hi > (h / 8) * (w / 8) {
        return Err(Error::Config(format!("instances_per_image ({lo}, {hi}) invalid for a {h}×{w} grid")));
    }
    let m = cfg.scenario_mix;
    if [m.multi, m.single, m.none].iter().any(|&p| !(0.0..=1.0).contains(&p)) || (m.multi + m.single + m.none - 1.0).abs() > 1e-9 {
        return Err(Error::Config("scenario_mix must be probabilities summing to 1".into()));
    }
    if m.multi > 0.0 && hi < 2 {
        return Err(Error::Config("multi-target expressions need at least two instances per image".into()));
    }
    if cfg.expr_per_image == 0 {
        return Err(Error::Config("expr_per_image must be positive".into()));
    }
    Ok(())
}

/// Exact scenario quotas by largest remainder, shuffled.
fn scenario_plan(cfg: &GenConfig, rng: &mut impl Rng) -> Vec<Scenario> {
    let total = cfg.n_images * cfg.expr_per_image;
    let m = cfg.scenario_mix;
    let shares = [(Scenario::Multi, m.multi), (Scenario::Single, m.single), (Scenario::None, m.none)];
    let mut quota: Vec<(Scenario, usize, f64)> = shares
        .iter()
        .map(|&(s, p)| {
            let exact = p * total as f64;
            (s, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut left = total - quota.iter().map(|q| q.1).sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        quota[i].1 += 1;
        left -= 1;
    }
    let mut plan: Vec<Scenario> = quota.iter().flat_map(|&(s, n, _)| std::iter::repeat(s).take(n)).collect();
    plan.shuffle(rng);
    plan
}

/// Candidate expressions for `scenario` in `scene`. Negatives are deceptive:
/// an absent category qualified by a colour or size that does occur in the scene.
pub fn candidates(scene: &Scene, n_categories: usize, n_colors: usize, scenario: Scenario) -> Vec<(Expression, TemplateKind, Vec<usize>)> {
    let colors: Vec<usize> = scene.instances.iter().map(|i| i.color).collect();
    let sizes: Vec<Size> = scene.instances.iter().map(|i| i.size).collect();
    let present = scene.categories_present();
    let mut out = Vec::new();
    for e in Expression::enumerate(n_categories, n_colors) {
        let Some(sel) = e.select(scene) else { continue };
        if Scenario::of_count(sel.len()) != scenario {
            continue;
        }
        let kind = if sel.is_empty() {
            match e {
                Expression::Attribute { cat, color, size, .. }
                    if !present.contains(&cat) && color.is_none_or(|c| colors.contains(&c)) && size.is_none_or(|s| sizes.contains(&s)) =>
                {
                    TemplateKind::Deceptive
                }
                _ => continue,
            }
        } else {
            e.kind()
        };
        out.push((e, kind, sel));
    }
    out
}

fn pick(cands: &[(Expression, TemplateKind, Vec<usize>)], rng: &mut impl Rng) -> (Expression, TemplateKind, Vec<usize>) {
    let mut kinds: Vec<TemplateKind> = cands.iter().map(|c| c.1).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let pool: Vec<_> = cands.iter().filter(|c| c.1 == kind).collect();
    pool[rng.gen_range(0..pool.len())].clone()
}

/// Samples of one image, or fewer when some slots stay unsatisfiable after [`MAX_RETRIES`] scenes.
fn generate_image(cfg: &GenConfig, vocab: &Vocab, seed: u64, image_id: u64, plan: &[Scenario]) -> Result<Vec<SampleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image_id));
    let (lo, hi) = cfg.instances_per_image;
    let mut best: Vec<Option<(Expression, TemplateKind, Vec<usize>)>> = vec![];
    let mut best_scene = None;
    for _ in 0..MAX_RETRIES {
        let need_multi = plan.contains(&Scenario::Multi);
        let n = rng.gen_range(lo.max(if need_multi { 2 } else { 1 })..=hi);
        let scene = Scene::random(cfg.grid_hw, cfg.n_categories, cfg.n_colors, n, &mut rng)?;
        let picks: Vec<_> = plan
            .iter()
            .map(|&sc| {
                let c = candidates(&scene, cfg.n_categories, cfg.n_colors, sc);
                (!c.is_empty()).then(|| pick(&c, &mut rng))
            })
            .collect();
        let ok = picks.iter().filter(|p| p.is_some()).count();
        if best_scene.is_none() || ok > best.iter().filter(|p| p.is_some()).count() {
            best = picks;
            best_scene = Some(scene);
        }
        if ok == plan.len() {
            break;
        }
    }
    let scene = best_scene.expect("at least one attempt");
    let (h, w) = cfg.grid_hw;
    let mut out = Vec::new();
    for (e, kind, sel) in best.into_iter().flatten() {
        let mask = scene.mask(&sel);
        let counts = scene.counts(&sel, cfg.n_categories);
        let exist = u8::from(!sel.is_empty());
        out.push(SampleRecord {
            image_id,
            grid: scene.grid.cells.clone(),
            tokens: vocab.encode(&e.words())?,
            text: e.text(),
            mask_rle: rle_encode(&mask, h, w)?,
            counts,
            exist,
            polarity: if exist == 1 { Polarity::Positive } else { Polarity::Negative },
            scenario: Scenario::of_count(sel.len()),
            template: kind,
        });
    }
    Ok(out)
}

/// Deterministic dataset for `(cfg, seed)`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    validate_gen(cfg)?;
    let vocab = Vocab::grammar();
    let mut plan_rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = scenario_plan(cfg, &mut plan_rng);
    let mut samples = Vec::with_capacity(plan.len());
    for (img, chunk) in plan.chunks(cfg.expr_per_image).enumerate() {
        samples.extend(generate_image(cfg, &vocab, seed, img as u64, chunk)?);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            grid_hw: cfg.grid_hw,
            n_categories: cfg.n_categories,
            seed,
            vocab_ref: "vocab.json".into(),
            n_colors: cfg.n_colors,
            n_cell_classes: 1 + cfg.n_categories * cfg.n_colors,
            categories: SHAPES[..cfg.n_categories].iter().map(|s| s.0.to_string()).collect(),
            n_images: cfg.n_images,
            expr_per_image: cfg.expr_per_image,
        },
        samples,
        vocab: Some(vocab),
    })
}

impl Dataset {
    pub fn vocab(&self) -> Result<&Vocab> {
        self.vocab.as_ref().ok_or_else(|| Error::Format("dataset has no vocabulary loaded".into()))
    }

    /// Writes `dataset.json` and `vocab.json` into `dir`; returns the dataset path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(&self.meta.vocab_ref), serde_json::to_string_pretty(self.vocab()?)?)?;
        let path = dir.join("dataset.json");
        std::fs::write(&path, serde_json::to_string(self)?)?;
        Ok(path)
    }

    /// Reads a dataset and its vocabulary, validating every sample.
    pub fn load(path: &Path) -> Result<Self> {
        let mut ds: Dataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        ds.vocab = Some(Vocab::from_json(&std::fs::read_to_string(dir.join(&ds.meta.vocab_ref))?)?);
        ds.decode()?;
        Ok(ds)
    }

    pub fn decode_sample(&self, r: &SampleRecord) -> Result<GresSample> {
        let m = &self.meta;
        let (h, w) = m.grid_hw;
        let vocab = self.vocab()?;
        let grid = Grid::new(h, w, r.grid.clone()).map_err(|e| Error::Format(format!("sample {}: {e}", r.image_id)))?;
        if let Some(&c) = grid.cells.iter().find(|&&c| c as usize >= m.n_cell_classes) {
            return Err(Error::Format(format!("sample {}: cell id {c} out of range", r.image_id)));
        }
        if let Some(&t) = r.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Vocabulary(t));
        }
        let gt_mask = rle_decode(&r.mask_rle, h, w)?;
        if r.counts.len() != m.n_categories {
            return Err(Error::Format(format!("sample {}: {} counts for C = {}", r.image_id, r.counts.len(), m.n_categories)));
        }
        let nonempty = gt_mask.iter().any(|&v| v == 1);
        let counted = r.counts.iter().sum::<u32>() > 0;
        if (r.exist == 1) != nonempty || nonempty != counted || r.exist > 1 {
            return Err(Error::Format(format!("sample {}: exist/mask/counts disagree", r.image_id)));
        }
        if r.scenario == Scenario::None && r.polarity != Polarity::Negative {
            return Err(Error::Format(format!("sample {}: scenario none with positive polarity", r.image_id)));
        }
        Ok(GresSample {
            image_id: r.image_id,
            grid,
            tokens: r.tokens.clone(),
            text: r.text.clone(),
            gt_mask,
            gt_counts: r.counts.iter().map(|&c| f64::from(c)).collect(),
            gt_exist: r.exist,
            polarity: r.polarity,
            scenario: r.scenario,
        })
    }

    pub fn decode(&self) -> Result<Vec<GresSample>> {
        self.samples.iter().map(|r| self.decode_sample(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioMix;

    #[test]
    fn all_circles_counts_every_circle() {
        // 3 circles and 1 square
        let mut grid = Grid::background(32, 32);
        let mut instances = vec![];
        for (k, cat) in [0usize, 0, 0, 1].into_iter().enumerate() {
            let inst = Instance { category: cat, color: 0, size: Size::Small, origin: (0, 8 * k) };
            for (y, x) in inst.cells() {
                grid.set(y, x, cell_class(cat, 0, 3));
            }
            instances.push(inst);
        }
        let scene = Scene { grid, instances };
        let sel = Expression::Category { cat: 0 }.select(&scene).unwrap();
        assert_eq!(scene.counts(&sel, 4), vec![3, 0, 0, 0]);
        assert_eq!(Scenario::of_count(sel.len()), Scenario::Multi);
        let absent = Expression::Attribute { cat: 3, color: Some(0), size: None, all: false };
        assert_eq!(absent.select(&scene).unwrap(), Vec::<usize>::new());
        let c = candidates(&scene, 4, 3, Scenario::None);
        assert!(c.iter().all(|(_, k, s)| *k == TemplateKind::Deceptive && s.is_empty()));
        assert!(c.iter().any(|(e, _, _)| *e == absent));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = GenConfig { n_images: 20, expr_per_image: 2, ..GenConfig::default() };
        let a = generate(&cfg, 9).unwrap();
        let b = generate(&cfg, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&generate(&cfg, 10).unwrap()).unwrap());
        let samples = a.decode().unwrap();
        assert_eq!(samples.len(), 40);
        for s in &samples {
            assert!(s.tokens.len() <= 20);
        }
    }

    #[test]
    fn bad_configs() {
        let base = GenConfig::default();
        let mix = ScenarioMix { multi: 0.5, single: 0.5, none: 0.5 };
        for bad in [
            GenConfig { n_categories: 13, ..base.clone() },
            GenConfig { n_categories: 1, ..base.clone() },
            GenConfig { grid_hw: (30, 32), ..base.clone() },
            GenConfig { scenario_mix: mix, ..base.clone() },
            GenConfig { instances_per_image: (3, 2), ..base.clone() },
        ] {
            assert!(matches!(generate(&bad, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn quotas_are_exact() {
        let cfg = GenConfig { n_images: 10, ..GenConfig::default() };
        let plan = scenario_plan(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(plan.iter().filter(|&&s| s == Scenario::None).count(), 3);
        assert_eq!(plan.iter().filter(|&&s| s == Scenario::Multi).count(), 4);
    }
}
