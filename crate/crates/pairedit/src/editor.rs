//! Training objective and sampler for the paired-editing model.
//!
//! Training draws `t ~ U(0,1)` and Gaussian noise, blends the target
//! payload as `x_t = (1-t) * x_target + t * eps`, and regresses the model's
//! velocity prediction against `eps - x_target` on the noisy rows only.
//! Condition dropout replaces the prompt pair and/or the instruction with
//! their learned null embeddings, independently, each with probability
//! `p_drop`. Per-instance draw order is fixed: t, noise, prompt drop, text
//! drop.
//!
//! Sampling integrates `dx/dt = -v` with uniform Euler steps from t=1 to
//! t=0. The clean source payload is rebuilt into condition tokens from the
//! same input every step, so condition rows never absorb noise.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::patch::{patchify, unpatchify};
use crate::model::{Model, Variant};
use crate::rng::{derive_seed, tag, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One training or evaluation example in image form.
pub struct EditInstance<'a> {
    pub prompt_src: &'a Image,
    pub prompt_tar: &'a Image,
    pub src: &'a Image,
    pub tar: &'a Image,
    pub instruction_id: usize,
}

fn check_resolution(model_res: usize, img: &Image, what: &str) -> Result<()> {
    if img.width != model_res || img.height != model_res {
        return Err(Error::Shape(format!(
            "{what} is {}x{}, model expects {}x{}",
            img.width, img.height, model_res, model_res
        )));
    }
    Ok(())
}

/// Prompt tokens for one instance under the current variant, honoring
/// condition dropout. `None` means the variant takes no prompt at all.
fn prompt_tokens<F: Scalar>(
    model: &Model<F>,
    prompt_src: &Image,
    prompt_tar: &Image,
    dropped: bool,
) -> Result<Option<Tensor<F>>> {
    if model.variant == Variant::Plain {
        return Ok(None);
    }
    if dropped {
        return Ok(Some(model.null_prompt_tokens()?));
    }
    Ok(Some(model.encode_prompt(prompt_src, prompt_tar)?))
}

/// Build the velocity-matching loss for one batch. Returns the loss node
/// (mean over instances) and the drawn timesteps, one per instance.
pub fn training_step<F: Scalar>(
    model: &Model<F>,
    batch: &[EditInstance<'_>],
    p_drop: f64,
    rng: &mut Rng,
) -> Result<(Tensor<F>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("training batch is empty".into()));
    }
    let cfg = &model.cfg;
    let n = cfg.n_patches();
    let pd = cfg.patch_dim();
    let mut losses: Vec<Tensor<F>> = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());

    for inst in batch {
        check_resolution(cfg.resolution, inst.src, "query source")?;
        check_resolution(cfg.resolution, inst.tar, "query target")?;

        let t = rng.uniform();
        let eps: Vec<f64> = (0..n * pd).map(|_| rng.normal()).collect();
        let drop_prompt = rng.bernoulli(p_drop);
        let drop_text = rng.bernoulli(p_drop);
        ts.push(t);

        let (tar_payload, _) = patchify::<F>(inst.tar, cfg.patch);
        let (src_payload, _) = patchify::<F>(inst.src, cfg.patch);
        let mut x_t = Vec::with_capacity(n * pd);
        let mut u = Vec::with_capacity(n * pd);
        for (i, &tv) in tar_payload.iter().enumerate() {
            let e = F::of(eps[i]);
            x_t.push(F::of(1.0 - t) * tv + F::of(t) * e);
            u.push(e - tv);
        }
        let noisy = Tensor::new(x_t, &[n, pd]);
        let source = Tensor::new(src_payload, &[n, pd]);
        let target = Tensor::new(u, &[n, pd]);

        let c_v = prompt_tokens(model, inst.prompt_src, inst.prompt_tar, drop_prompt)?;
        let instr = if drop_text { cfg.empty_text_id() } else { inst.instruction_id };
        let v = model.forward_sequence(&noisy, &source, instr, c_v.as_ref(), t);
        losses.push(v.mse(&target));
    }

    let mut total = losses[0].clone();
    for l in &losses[1..] {
        total = total.add(l);
    }
    Ok((total.scale(F::of(1.0 / batch.len() as f64)), ts))
}

/// Classifier-free guidance combination: `v_u + g * (v_c - v_u)`.
pub fn combine_guidance<F: Scalar>(v_uncond: &[F], v_cond: &[F], guidance: f64) -> Vec<F> {
    assert_eq!(v_uncond.len(), v_cond.len());
    let g = F::of(guidance);
    v_uncond
        .iter()
        .zip(v_cond)
        .map(|(&u, &c)| u + g * (c - u))
        .collect()
}

/// Uniform-step Euler integration of `dx/dt = -v` from t=1 down to t=0.
/// `velocity(x, t, step)` supplies the field; any non-finite state after an
/// update aborts with the step index.
pub fn integrate<F: Scalar>(
    mut x: Vec<F>,
    steps: usize,
    mut velocity: impl FnMut(&[F], f64, usize) -> Result<Vec<F>>,
) -> Result<Vec<F>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let inv = F::of(1.0 / steps as f64);
    for s in 0..steps {
        let t = 1.0 - s as f64 / steps as f64;
        let v = velocity(&x, t, s)?;
        assert_eq!(v.len(), x.len(), "velocity length");
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi = *xi - *vi * inv;
        }
        if x.iter().any(|xi| !xi.f64().is_finite()) {
            return Err(Error::Numeric(format!("non-finite sampler state at step {s}")));
        }
    }
    Ok(x)
}

pub struct SampleRequest<'a> {
    /// Before/after exemplar pair; `None` falls back to the learned null
    /// prompt on prompt-conditioned variants.
    pub prompt: Option<(&'a Image, &'a Image)>,
    pub src: &'a Image,
    pub instruction_id: usize,
    pub steps: usize,
    /// Guidance scale; zero runs a single conditional pass per step.
    pub guidance: f64,
    pub seed: u64,
}

/// Per-step observations of one sampling trajectory.
#[derive(Default)]
pub struct SampleTrace<F: Scalar> {
    pub ts: Vec<f64>,
    /// Raw source payload handed to the model at each step.
    pub cond_payloads: Vec<Vec<F>>,
    /// Condition token embeddings derived from that payload at each step.
    pub cond_tokens: Vec<Vec<F>>,
}

pub fn sample<F: Scalar>(model: &Model<F>, req: &SampleRequest<'_>) -> Result<Image> {
    sample_traced(model, req, None)
}

pub fn sample_traced<F: Scalar>(
    model: &Model<F>,
    req: &SampleRequest<'_>,
    mut trace: Option<&mut SampleTrace<F>>,
) -> Result<Image> {
    if req.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    if !req.guidance.is_finite() || req.guidance < 0.0 {
        return Err(Error::Config(format!("guidance must be finite and >= 0, got {}", req.guidance)));
    }
    let cfg = &model.cfg;
    check_resolution(cfg.resolution, req.src, "query source")?;
    let n = cfg.n_patches();
    let pd = cfg.patch_dim();

    let c_v = match req.prompt {
        Some((a, b)) => prompt_tokens(model, a, b, false)?,
        None => match model.variant {
            Variant::Plain => None,
            _ => Some(model.null_prompt_tokens()?),
        },
    };
    let null_cv = match model.variant {
        Variant::Plain => None,
        _ => Some(model.null_prompt_tokens()?),
    };
    let empty_id = cfg.empty_text_id();

    let (src_payload, _) = patchify::<F>(req.src, cfg.patch);
    let source = Tensor::new(src_payload, &[n, pd]);

    let mut rng = Rng::seed(derive_seed(req.seed, &[tag::SAMPLE]));
    let x1: Vec<F> = (0..n * pd).map(|_| F::of(rng.normal())).collect();

    let x0 = integrate(x1, req.steps, |x, t, _step| {
        if let Some(tr) = trace.as_deref_mut() {
            tr.ts.push(t);
            tr.cond_payloads.push(source.to_vec());
            tr.cond_tokens.push(model.embed_condition(&source).to_vec());
        }
        let noisy = Tensor::new(x.to_vec(), &[n, pd]);
        let v_c = model
            .forward_sequence(&noisy, &source, req.instruction_id, c_v.as_ref(), t)
            .to_vec();
        if req.guidance > 0.0 {
            let v_u = model
                .forward_sequence(&noisy, &source, empty_id, null_cv.as_ref(), t)
                .to_vec();
            Ok(combine_guidance(&v_u, &v_c, req.guidance))
        } else {
            Ok(v_c)
        }
    })?;

    Ok(unpatchify(&x0, cfg.resolution, cfg.resolution, cfg.patch))
}

/// End-to-end edit: encode the exemplar pair, condition on the clean
/// source, and sample the predicted target.
pub fn edit<F: Scalar>(
    model: &Model<F>,
    prompt_src: &Image,
    prompt_tar: &Image,
    src: &Image,
    instruction_id: usize,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Image> {
    sample(
        model,
        &SampleRequest {
            prompt: Some((prompt_src, prompt_tar)),
            src,
            instruction_id,
            steps,
            guidance,
            seed,
        },
    )
}
