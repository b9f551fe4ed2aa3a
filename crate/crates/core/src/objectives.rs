//! Loss constructors for the three training paths, their weighted
//! combinations, and the region masking that feeds masked image modeling.

use alloc::vec::Vec;

use rand::{Rng as _, RngCore, SeedableRng};

use crate::data::{Batch, PAD};
use crate::error::{invalid, shape_err, Result};
use crate::model::{MimOutput, SeqOutput};
use crate::tensor::{Graph, Scalar, Var};

/// Default masking probability of masked region modeling.
pub const MRM_PROBABILITY: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Every region of one image per example.
    Image,
    /// Independent regions across all images.
    Regions,
}

/// Which region slots were zeroed, per example of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub mode: MaskMode,
    /// Sorted slot indices into the padded region sequence.
    pub masked: Vec<Vec<usize>>,
    /// Seed of the stream that produced the plan.
    pub seed: u64,
}

impl MaskPlan {
    pub fn total(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }

    /// Masked image per example in [`MaskMode::Image`] plans.
    pub fn images(&self, regions_per_image: usize) -> Vec<Option<usize>> {
        self.masked.iter().map(|m| m.first().map(|&s| s / regions_per_image)).collect()
    }
}

/// Balancing factors `α` (Vis2Sum) and `β` (MIM).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid!("loss weights must be finite and non-negative, got α={} β={}", self.alpha, self.beta));
        }
        Ok(())
    }
}

fn zero_slots(batch: &mut Batch, plan: &MaskPlan, d_visual: usize) {
    for (ex, masked) in batch.items.iter_mut().zip(&plan.masked) {
        for &s in masked {
            ex.features[s * d_visual..(s + 1) * d_visual].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn plan_rng(rng: &mut crate::Rng) -> (u64, crate::Rng) {
    let seed = rng.next_u64();
    (seed, crate::Rng::seed_from_u64(seed))
}

fn layout(batch: &Batch) -> Result<(usize, usize)> {
    let ex = batch.items.first().ok_or_else(|| invalid!("empty batch"))?;
    let slots = ex.region_mask.len();
    if slots == 0 || ex.features.len() % slots != 0 {
        return Err(shape_err!("mask", "features do not split into {} region slots", slots));
    }
    Ok((slots, ex.features.len() / slots))
}

/// Zeroes every region of one uniformly chosen present image per example.
pub fn mask_one_image(batch: &mut Batch, regions_per_image: usize, rng: &mut crate::Rng) -> Result<MaskPlan> {
    let (slots, dv) = layout(batch)?;
    if regions_per_image == 0 || slots % regions_per_image != 0 {
        return Err(shape_err!("mask_one_image", "{} slots are not whole images of {}", slots, regions_per_image));
    }
    let (seed, mut draw) = plan_rng(rng);
    let mut masked = Vec::with_capacity(batch.len());
    for (k, ex) in batch.items.iter().enumerate() {
        if ex.n_images == 0 {
            return Err(invalid!("example {} has no image to mask", k));
        }
        let img = draw.random_range(0..ex.n_images);
        masked.push((img * regions_per_image..(img + 1) * regions_per_image).collect());
    }
    let plan = MaskPlan { mode: MaskMode::Image, masked, seed };
    zero_slots(batch, &plan, dv);
    Ok(plan)
}

/// Zeroes each present region independently with probability `p`.
pub fn mask_regions(batch: &mut Batch, p: f64, rng: &mut crate::Rng) -> Result<MaskPlan> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid!("mask probability must lie in (0, 1), got {}", p));
    }
    let (_, dv) = layout(batch)?;
    let (seed, mut draw) = plan_rng(rng);
    let masked = batch
        .items
        .iter()
        .map(|ex| (0..ex.region_mask.len()).filter(|&s| ex.region_mask[s] && draw.random_bool(p)).collect())
        .collect();
    let plan = MaskPlan { mode: MaskMode::Regions, masked, seed };
    zero_slots(batch, &plan, dv);
    Ok(plan)
}

fn sequence_loss<T: Scalar>(graph: &mut Graph<'_, T>, out: &SeqOutput, smoothing: f64) -> Result<Var> {
    graph.cross_entropy(out.logits, &out.targets, T::of(smoothing), PAD as usize)
}

/// Mean label-smoothed NLL of the multimodal path over non-pad targets.
pub fn loss_mas<T: Scalar>(graph: &mut Graph<'_, T>, out: &SeqOutput, smoothing: f64) -> Result<Var> {
    sequence_loss(graph, out, smoothing)
}

/// Same loss form as [`loss_mas`] over the vision-only path.
pub fn loss_vis2sum<T: Scalar>(graph: &mut Graph<'_, T>, out: &SeqOutput, smoothing: f64) -> Result<Var> {
    sequence_loss(graph, out, smoothing)
}

/// Sum of per-region `KL(q ‖ p)` over masked regions, divided by batch size.
pub fn loss_mim<T: Scalar>(graph: &mut Graph<'_, T>, out: &MimOutput<T>, plan: &MaskPlan) -> Result<Var> {
    let expected: Vec<usize> = plan.masked.iter().map(Vec::len).collect();
    if out.counts != expected {
        return Err(invalid!("mask plan counts {:?} do not match predictions {:?}", expected, out.counts));
    }
    if graph.dims(out.probs).0 != plan.total() {
        return Err(invalid!("{} predicted rows for {} masked regions", graph.dims(out.probs).0, plan.total()));
    }
    let kl = graph.kl_divergence(&out.targets, out.probs)?;
    Ok(graph.scale(kl, T::of(1.0 / plan.masked.len() as f64)))
}

/// `L_MAS + α·L_Vis2Sum + β·L_MIM` in the graph; a missing MIM term counts
/// as zero.
pub fn joint_mono<T: Scalar>(
    graph: &mut Graph<'_, T>,
    mas: Var,
    vis2sum: Var,
    mim: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let v = graph.scale(vis2sum, T::of(w.alpha));
    let mut j = graph.add(mas, v)?;
    if let Some(mim) = mim {
        let m = graph.scale(mim, T::of(w.beta));
        j = graph.add(j, m)?;
    }
    Ok(j)
}

/// Scalar form of [`joint_mono`].
pub fn joint_mono_value(mas: f64, vis2sum: f64, mim: f64, w: &LossWeights) -> f64 {
    mas + w.alpha * vis2sum + w.beta * mim
}

/// Sum of per-language joint losses.
pub fn joint_multi(per_language: &[f64]) -> Result<f64> {
    if per_language.is_empty() {
        return Err(invalid!("joint_multi needs at least one language"));
    }
    Ok(per_language.iter().sum())
}

#[cfg(test)]
mod tests {
    use alloc::string::String;
    use alloc::vec;

    use super::*;
    use crate::data::PaddedExample;
    use crate::tensor::{ParamStore, Tensor};

    fn example(n_images: usize, n: usize, m: usize, dv: usize) -> PaddedExample {
        let slots = n * m;
        PaddedExample {
            lang: String::from("en"),
            article: vec![4, 0],
            article_mask: vec![true, false],
            summary: vec![5, 1, 0],
            summary_mask: vec![true, true, false],
            features: (0..slots * dv).map(|k| 1.0 + k as f32).collect(),
            boxes: vec![0.5; slots * 4],
            classes: vec![0.5; slots * 2],
            region_mask: (0..slots).map(|s| s < n_images * m).collect(),
            n_images,
        }
    }

    #[test]
    fn single_image_always_chosen() {
        let mut rng = crate::rng_from_seed(1);
        for _ in 0..20 {
            let mut b = Batch { items: vec![example(1, 3, 2, 2)] };
            let plan = mask_one_image(&mut b, 2, &mut rng).unwrap();
            assert_eq!(plan.masked, vec![vec![0, 1]]);
            assert!(b.items[0].features[..4].iter().all(|&v| v == 0.0));
            assert!(b.items[0].features[4..].iter().all(|&v| v != 0.0));
        }
    }

    #[test]
    fn image_choice_is_uniform() {
        // 10 000 draws over 5 images: mean 2000, 3σ = 3·sqrt(10000·0.2·0.8) = 120
        let mut rng = crate::rng_from_seed(2);
        let mut counts = [0usize; 5];
        let base = Batch { items: vec![example(5, 5, 1, 1)] };
        for _ in 0..10_000 {
            let mut b = base.clone();
            let plan = mask_one_image(&mut b, 1, &mut rng).unwrap();
            counts[plan.images(1)[0].unwrap()] += 1;
        }
        for c in counts {
            assert!((1850..=2150).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn imageless_example_rejected() {
        let mut b = Batch { items: vec![example(2, 2, 2, 1), example(0, 2, 2, 1)] };
        assert!(mask_one_image(&mut b, 2, &mut crate::rng_from_seed(3)).is_err());
    }

    #[test]
    fn region_masking_rate() {
        // 180 regions at p = 0.15: mean 27, sd of the 10 000-draw mean ≈ 0.05
        let mut rng = crate::rng_from_seed(4);
        let base = Batch { items: vec![example(5, 5, 36, 1)] };
        let mut total = 0usize;
        for _ in 0..10_000 {
            let mut b = base.clone();
            total += mask_regions(&mut b, MRM_PROBABILITY, &mut rng).unwrap().total();
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 27.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn padded_regions_never_masked() {
        let mut rng = crate::rng_from_seed(5);
        for _ in 0..200 {
            let mut b = Batch { items: vec![example(2, 5, 3, 1)] };
            let plan = mask_regions(&mut b, 0.9, &mut rng).unwrap();
            assert!(plan.masked[0].iter().all(|&s| s < 6));
            for (s, &v) in b.items[0].features.iter().enumerate() {
                assert_eq!(v == 0.0, plan.masked[0].contains(&s));
            }
        }
        let mut b = Batch { items: vec![example(2, 5, 3, 1)] };
        assert!(mask_regions(&mut b, 0.0, &mut rng).is_err());
        assert!(mask_regions(&mut b, 1.0, &mut rng).is_err());
    }

    #[test]
    fn small_probability_masks_almost_nothing() {
        let mut rng = crate::rng_from_seed(6);
        let base = Batch { items: vec![example(5, 5, 36, 1)] };
        let total: usize = (0..1000).map(|_| mask_regions(&mut base.clone(), 1e-6, &mut rng).unwrap().total()).sum();
        assert!(total <= 2);
    }

    fn seq(g: &mut Graph<'_, f64>, rows: &[&[f64]], targets: &[usize]) -> SeqOutput {
        let logits = g.constant(&Tensor::from_rows(rows));
        SeqOutput { logits, targets: targets.to_vec(), lengths: vec![targets.len()] }
    }

    #[test]
    fn sequence_losses() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let uniform = seq(&mut g, &[&[0.0; 8], &[0.0; 8]], &[3, 5]);
        let l = loss_mas(&mut g, &uniform, 0.1).unwrap();
        assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-12);
        let l = loss_vis2sum(&mut g, &uniform, 0.0).unwrap();
        assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-12);

        let sharp = seq(&mut g, &[&[0.0, 0.0, 800.0, 0.0], &[0.0; 4]], &[2, 0]);
        let l = loss_mas(&mut g, &sharp, 0.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let out = seq(&mut g, &[&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.0]], &[1, 2]);
        let a = loss_mas(&mut g, &out, 0.1).unwrap();
        let b = g.cross_entropy(out.logits, &out.targets, 0.1, 0).unwrap();
        assert_eq!(g.scalar(a).to_bits(), g.scalar(b).to_bits());
    }

    fn mim_out(g: &mut Graph<'_, f64>, p: &[&[f64]], q: &[&[f64]], counts: Vec<usize>) -> MimOutput<f64> {
        MimOutput {
            probs: g.constant(&Tensor::from_rows(p)),
            targets: Tensor::from_rows(q),
            counts,
            features: Vec::new(),
        }
    }

    #[test]
    fn mim_loss_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let plan = MaskPlan { mode: MaskMode::Image, masked: vec![vec![0, 1]], seed: 0 };
        let same = mim_out(&mut g, &[&[0.2, 0.8], &[0.5, 0.5]], &[&[0.2, 0.8], &[0.5, 0.5]], vec![2]);
        let l = loss_mim(&mut g, &same, &plan).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        // q one-hot, p uniform over 2 classes: each region contributes ln 2
        let half = mim_out(&mut g, &[&[0.5, 0.5], &[0.5, 0.5]], &[&[1.0, 0.0], &[0.0, 1.0]], vec![2]);
        let l = loss_mim(&mut g, &half, &plan).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-15);

        // two examples with one region each: batch mean of ln 2 and 0
        let plan2 = MaskPlan { mode: MaskMode::Image, masked: vec![vec![0], vec![3]], seed: 0 };
        let two = mim_out(&mut g, &[&[0.5, 0.5], &[1.0, 0.0]], &[&[1.0, 0.0], &[1.0, 0.0]], vec![1, 1]);
        let l = loss_mim(&mut g, &two, &plan2).unwrap();
        assert!((g.scalar(l) - 2f64.ln() / 2.0).abs() < 1e-15);

        let wrong = mim_out(&mut g, &[&[0.5, 0.5]], &[&[1.0, 0.0]], vec![1]);
        assert!(loss_mim(&mut g, &wrong, &plan).is_err());
    }

    #[test]
    fn joint_combinations() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let [a, b, c] = [2.0, 1.0, 0.5].map(|v| g.constant(&Tensor::scalar(v)));
        let j = joint_mono(&mut g, a, b, Some(c), &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(j), 3.5);
        let j = joint_mono(&mut g, a, b, Some(c), &LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(g.scalar(j), 2.0);
        assert_eq!(joint_mono_value(2.0, 1.0, 0.5, &LossWeights::default()), 3.5);
        assert!(joint_mono_value(2.0, 1.0, 0.5, &LossWeights::new(1.5, 1.0).unwrap()) > 3.5);
        assert_eq!(LossWeights::default(), LossWeights { alpha: 1.0, beta: 1.0 });
        assert!(LossWeights::new(-0.1, 1.0).is_err());

        assert_eq!(joint_multi(&[3.5]).unwrap(), joint_mono_value(2.0, 1.0, 0.5, &LossWeights::default()));
        assert_eq!(joint_multi(&[1.0, 2.0, 3.0]).unwrap(), 6.0);
        assert!(joint_multi(&[]).is_err());
    }
}
