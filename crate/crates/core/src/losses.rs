//! Conditional Wasserstein objectives, gradient penalty, identity and pixel
//! losses, and the λ_att ramp.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::embedder::FeatureEmbedder;
use crate::error::{Error, Result};
use crate::tensor::{grad, no_grad, Element, Tensor};

/// Added under the square root of the penalty norm so its gradient stays finite.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_att_max: f64,
    pub lambda_pix: f64,
    pub lambda_id: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_att_max: 0.75,
            lambda_pix: 8.0,
            lambda_id: 0.02,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_att_max", self.lambda_att_max),
            ("lambda_pix", self.lambda_pix),
            ("lambda_id", self.lambda_id),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Configuration(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Anything that maps (images, attributes) to one score per sample.
pub trait Critic<E: Element> {
    fn score(&self, images: &Tensor<E>, attrs: &Tensor<E>) -> Result<Tensor<E>>;

    /// Whether scores carry a gradient path back to the images.
    fn differentiable(&self) -> bool {
        true
    }
}

impl<E: Element> Critic<E> for Discriminator<E> {
    fn score(&self, images: &Tensor<E>, attrs: &Tensor<E>) -> Result<Tensor<E>> {
        self.discriminate(images, attrs)
    }
}

/// Linear ramp `max·step/total`, clamped to `[0, max]`.
pub fn lambda_att_schedule(step: u64, total_steps: u64, lambda_att_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Argument("lambda_att ramp needs total_steps >= 1".into()));
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    Ok((lambda_att_max * frac).clamp(0.0, lambda_att_max))
}

fn non_empty<E: Element>(t: &Tensor<E>, what: &str) -> Result<()> {
    if t.rank() == 0 || t.dim(0) == 0 {
        return Err(Error::Argument(format!("{what}: empty batch")));
    }
    Ok(())
}

/// `mean(negative) − mean(positive)` over per-sample critic scores.
pub fn wasserstein_gap<E: Element>(positive: &Tensor<E>, negative: &Tensor<E>) -> Result<Tensor<E>> {
    non_empty(positive, "critic scores")?;
    non_empty(negative, "critic scores")?;
    negative.mean_all()?.sub(&positive.mean_all()?)
}

/// Attribute-consistency term: mean D(I_o, ᾱ) − mean D(I_o, α).
pub fn loss_adv_att<E: Element, C: Critic<E> + ?Sized>(
    d: &C,
    real_old: &Tensor<E>,
    attrs: &Tensor<E>,
    mismatched: &Tensor<E>,
) -> Result<Tensor<E>> {
    non_empty(real_old, "loss_adv_att")?;
    wasserstein_gap(&d.score(real_old, attrs)?, &d.score(real_old, mismatched)?)
}

/// Authenticity term: mean D(fake, α_fake) − mean D(I_o, α_real).
pub fn loss_adv_auth<E: Element, C: Critic<E> + ?Sized>(
    d: &C,
    real_old: &Tensor<E>,
    real_attrs: &Tensor<E>,
    fake: &Tensor<E>,
    fake_attrs: &Tensor<E>,
) -> Result<Tensor<E>> {
    non_empty(real_old, "loss_adv_auth")?;
    non_empty(fake, "loss_adv_auth")?;
    wasserstein_gap(&d.score(real_old, real_attrs)?, &d.score(fake, fake_attrs)?)
}

/// Generator adversarial term: −mean D(fake, α).
pub fn loss_adv_g<E: Element, C: Critic<E> + ?Sized>(d: &C, fake: &Tensor<E>, attrs: &Tensor<E>) -> Result<Tensor<E>> {
    non_empty(fake, "loss_adv_g")?;
    d.score(fake, attrs)?.mean_all()?.neg()
}

/// λ_gp·mean((‖∇_x̂ D(x̂, α)‖ − 1)²) with one ε ~ U[0, 1) per sample drawn from `rng`.
pub fn gradient_penalty<E: Element, C: Critic<E> + ?Sized, R: Rng>(
    d: &C,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    attrs: &Tensor<E>,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<Tensor<E>> {
    non_empty(real, "gradient_penalty")?;
    let eps: Vec<f64> = (0..real.dim(0)).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_at(d, real, fake, attrs, lambda_gp, &eps)
}

/// [`gradient_penalty`] with explicit interpolation coefficients.
pub fn gradient_penalty_at<E: Element, C: Critic<E> + ?Sized>(
    d: &C,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    attrs: &Tensor<E>,
    lambda_gp: f64,
    eps: &[f64],
) -> Result<Tensor<E>> {
    if !d.differentiable() {
        return Err(Error::Capability(
            "gradient penalty needs a critic differentiable in its image input".into(),
        ));
    }
    non_empty(real, "gradient_penalty")?;
    if real.shape() != fake.shape() {
        return Err(Error::Dimension(format!(
            "real {:?} and fake {:?} batches differ",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.dim(0);
    if eps.len() != n {
        return Err(Error::Argument(format!("{} interpolation coefficients for {n} samples", eps.len())));
    }
    let mut eshape = vec![1; real.rank()];
    eshape[0] = n;
    let e = Tensor::<E>::from_f64(eps, &eshape)?;
    let x_hat = no_grad(|| -> Result<Tensor<E>> {
        let one_minus = e.neg()?.add_scalar(1.0)?;
        real.mul(&e)?.add(&fake.mul(&one_minus)?)
    })?
    .into_leaf();
    let total = d.score(&x_hat, attrs)?.sum_all()?;
    let g = grad(&total, &[&x_hat], true)?.remove(0);
    let norms = g.square()?.sum_per_sample()?.add_scalar(NORM_FLOOR)?.sqrt()?;
    norms.add_scalar(-1.0)?.square()?.mean_all()?.scale(lambda_gp)
}

/// λ_att·att + auth + gp.
pub fn loss_d_total<E: Element>(att: &Tensor<E>, auth: &Tensor<E>, gp: &Tensor<E>, lambda_att: f64) -> Result<Tensor<E>> {
    att.scale(lambda_att)?.add(auth)?.add(gp)
}

/// adv + λ_id·id + λ_pix·pix; pass `None` for `pix` on iterations without the pixel term.
pub fn loss_g_total<E: Element>(
    adv: &Tensor<E>,
    id: &Tensor<E>,
    pix: Option<&Tensor<E>>,
    weights: &LossWeights,
) -> Result<Tensor<E>> {
    let mut total = adv.add(&id.scale(weights.lambda_id)?)?;
    if let Some(p) = pix {
        total = total.add(&p.scale(weights.lambda_pix)?)?;
    }
    Ok(total)
}

/// Batch mean of ‖Δpool‖²_F + ‖Δfc‖²; the reference features carry no gradient.
pub fn loss_id<E: Element, F: FeatureEmbedder<E> + ?Sized>(
    embedder: &F,
    young: &Tensor<E>,
    fake: &Tensor<E>,
) -> Result<Tensor<E>> {
    non_empty(fake, "loss_id")?;
    let (pool_y, fc_y) = no_grad(|| embedder.embed(young))?;
    let (pool_f, fc_f) = embedder.embed(fake)?;
    if pool_y.shape() != pool_f.shape() || fc_y.shape() != fc_f.shape() {
        return Err(Error::Configuration(format!(
            "embedder produced mismatched features: pool {:?} vs {:?}, fc {:?} vs {:?}",
            pool_y.shape(),
            pool_f.shape(),
            fc_y.shape(),
            fc_f.shape()
        )));
    }
    let n = fake.dim(0) as f64;
    let pool = pool_f.sub(&pool_y)?.square()?.sum_all()?;
    let fc = fc_f.sub(&fc_y)?.square()?.sum_all()?;
    pool.add(&fc)?.scale(1.0 / n)
}

/// Batch mean of the per-image mean squared pixel difference.
pub fn loss_pix<E: Element>(young: &Tensor<E>, fake: &Tensor<E>) -> Result<Tensor<E>> {
    if young.shape() != fake.shape() {
        return Err(Error::Dimension(format!(
            "pixel loss on mismatched batches {:?} and {:?}",
            young.shape(),
            fake.shape()
        )));
    }
    non_empty(fake, "loss_pix")?;
    fake.sub(young)?.square()?.mean_all()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    /// D(I, α) = α[0].
    struct FirstAttr;
    impl Critic<f64> for FirstAttr {
        fn score(&self, images: &Tensor<f64>, attrs: &Tensor<f64>) -> Result<Tensor<f64>> {
            let n = images.dim(0);
            attrs.narrow(1, 0, 1)?.reshape(&[n])
        }
    }

    /// D(I, ·) = mean(I) per sample.
    struct MeanCritic;
    impl Critic<f64> for MeanCritic {
        fn score(&self, images: &Tensor<f64>, _: &Tensor<f64>) -> Result<Tensor<f64>> {
            let per = (images.numel() / images.dim(0)) as f64;
            images.sum_per_sample()?.scale(1.0 / per)
        }
    }

    struct Opaque;
    impl Critic<f64> for Opaque {
        fn score(&self, images: &Tensor<f64>, _: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(&[images.dim(0)]))
        }
        fn differentiable(&self) -> bool {
            false
        }
    }

    #[test]
    fn ramp_examples() {
        assert_eq!(lambda_att_schedule(0, 100, 0.75).unwrap(), 0.0);
        assert_eq!(lambda_att_schedule(100, 100, 0.75).unwrap(), 0.75);
        assert_eq!(lambda_att_schedule(50, 100, 0.75).unwrap(), 0.375);
        assert_eq!(lambda_att_schedule(500, 100, 0.75).unwrap(), 0.75);
        assert!(matches!(lambda_att_schedule(0, 0, 0.75), Err(Error::Argument(_))));
    }

    #[test]
    fn attribute_term_stub_values() {
        let imgs = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let a = t(vec![1.0, 0.0], &[1, 2]);
        let b = t(vec![0.0, 1.0], &[1, 2]);
        assert_eq!(loss_adv_att(&FirstAttr, &imgs, &a, &b).unwrap().item().unwrap(), -1.0);
        assert_eq!(loss_adv_att(&MeanCritic, &imgs, &a, &b).unwrap().item().unwrap(), 0.0);
        let empty = Tensor::<f64>::zeros(&[0, 3, 2, 2]);
        let none = Tensor::<f64>::zeros(&[0, 2]);
        assert!(matches!(loss_adv_att(&FirstAttr, &empty, &none, &none), Err(Error::Argument(_))));
    }

    #[test]
    fn authenticity_and_generator_stub_values() {
        let a = t(vec![1.0, 0.0], &[1, 2]);
        let real = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let fake = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert_eq!(loss_adv_auth(&MeanCritic, &real, &a, &fake, &a).unwrap().item().unwrap(), -1.0);
        assert_eq!(loss_adv_auth(&MeanCritic, &real, &a, &real, &a).unwrap().item().unwrap(), 0.0);
        let half = Tensor::<f64>::full(&[1, 3, 2, 2], 0.5);
        assert_eq!(loss_adv_g(&MeanCritic, &half, &a).unwrap().item().unwrap(), -0.5);
    }

    #[test]
    fn composition_arithmetic() {
        assert_eq!(loss_d_total(&s(2.0), &s(3.0), &s(0.0), 0.0).unwrap().item().unwrap(), 3.0);
        assert_eq!(loss_d_total(&s(2.0), &s(3.0), &s(1.0), 0.75).unwrap().item().unwrap(), 5.5);
        assert_eq!(loss_d_total(&s(0.0), &s(0.0), &s(0.0), 0.75).unwrap().item().unwrap(), 0.0);
        let w = LossWeights::default();
        let total = loss_g_total(&s(1.0), &s(10.0), Some(&s(0.5)), &w).unwrap().item().unwrap();
        assert!((total - 5.2).abs() < 1e-12);
        let zero = LossWeights {
            lambda_pix: 0.0,
            lambda_id: 0.0,
            ..w
        };
        assert_eq!(loss_g_total(&s(1.0), &s(10.0), Some(&s(0.5)), &zero).unwrap().item().unwrap(), 1.0);
        assert_eq!(loss_g_total(&s(0.0), &s(0.0), Some(&s(0.0)), &w).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn pixel_loss_examples() {
        let a = Tensor::<f64>::full(&[2, 3, 4, 4], 0.1);
        assert_eq!(loss_pix(&a, &a).unwrap().item().unwrap(), 0.0);
        let b = a.add_scalar(0.5).unwrap();
        assert!((loss_pix(&a, &b).unwrap().item().unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(loss_pix(&a, &Tensor::zeros(&[2, 3, 4, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn penalty_requires_differentiable_critic() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let a = Tensor::zeros(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gradient_penalty(&Opaque, &x, &x, &a, 10.0, &mut rng),
            Err(Error::Capability(_))
        ));
    }
}
