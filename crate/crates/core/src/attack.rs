//! Gradient-based adversarial example crafting: FGSM, iterative FGSM, and
//! PGD, with L2/L-infinity ball projection and perturbation rescaling.
//!
//! Attacks are pure functions of (target, inputs, labels, spec, rng stream);
//! per-example noise comes from counter-based forks of the stream, so results
//! do not depend on crafting order.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{l2_norm, linf_norm, Real, Tensor};

/// Anything attacks can differentiate through: per-example loss values plus
/// the gradient of their sum with respect to the input batch.
pub trait AttackTarget {
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<AttackEval>;
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone)]
pub struct AttackEval {
    pub per_example_loss: Vec<Real>,
    /// Gradient of the summed loss; row `i` is the gradient of example `i`'s
    /// own loss because examples do not interact.
    pub input_grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn of(&self, v: &[Real]) -> Real {
        match self {
            Norm::L2 => l2_norm(v),
            Norm::Linf => linf_norm(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Ifgsm,
    Pgd,
}

/// Direction of each iterative step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirection {
    /// Elementwise gradient sign (the published update rule).
    Sign,
    /// Gradient scaled to unit L2 norm; standard practice for L2 adversaries.
    NormalizedGradient,
}

/// Fully determines an attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub norm: Norm,
    pub epsilon: Real,
    pub step: Real,
    pub steps: usize,
    pub random_start: bool,
    pub clamp: Option<(Real, Real)>,
    pub direction: StepDirection,
}

impl AttackSpec {
    /// Single sign step of size epsilon.
    pub fn fgsm(norm: Norm, epsilon: Real) -> Self {
        AttackSpec {
            method: AttackMethod::Fgsm,
            norm,
            epsilon,
            step: epsilon.max(Real::MIN_POSITIVE),
            steps: 1,
            random_start: false,
            clamp: None,
            direction: StepDirection::Sign,
        }
    }

    pub fn ifgsm(norm: Norm, epsilon: Real, step: Real, steps: usize) -> Self {
        AttackSpec {
            method: AttackMethod::Ifgsm,
            norm,
            epsilon,
            step,
            steps,
            random_start: false,
            clamp: None,
            direction: StepDirection::Sign,
        }
    }

    pub fn pgd(norm: Norm, epsilon: Real, step: Real, steps: usize) -> Self {
        AttackSpec {
            method: AttackMethod::Pgd,
            norm,
            epsilon,
            step,
            steps,
            random_start: true,
            clamp: None,
            direction: StepDirection::Sign,
        }
    }

    /// Parse grid names like "FGSM", "10-IFGSM", "20-PGD". IFGSM attacks run
    /// in the L-infinity norm, PGD in L2.
    pub fn from_name(name: &str, epsilon: Real, step: Real) -> Result<Self> {
        let (steps, method) = match name.split_once('-') {
            Some((k, m)) => {
                let steps: usize = k.parse().map_err(|_| {
                    Error::Contract(format!("bad step count in attack name '{name}'"))
                })?;
                (steps, m)
            }
            None => (1, name),
        };
        match method.to_ascii_uppercase().as_str() {
            "FGSM" => Ok(AttackSpec::fgsm(Norm::Linf, epsilon)),
            "IFGSM" => Ok(AttackSpec::ifgsm(Norm::Linf, epsilon, step, steps)),
            "PGD" => Ok(AttackSpec::pgd(Norm::L2, epsilon, step, steps)),
            _ => Err(Error::Contract(format!("unknown attack name '{name}'"))),
        }
    }

    pub fn with_clamp(mut self, lo: Real, hi: Real) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    pub fn with_direction(mut self, d: StepDirection) -> Self {
        self.direction = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Contract(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Contract(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        if self.steps == 0 {
            return Err(Error::Contract("step count must be at least 1".into()));
        }
        match self.method {
            AttackMethod::Fgsm => {
                if self.steps != 1 || self.random_start {
                    return Err(Error::Contract(
                        "FGSM forces steps = 1 and no random start".into(),
                    ));
                }
            }
            AttackMethod::Ifgsm => {
                if self.random_start {
                    return Err(Error::Contract("IFGSM forbids random start".into()));
                }
            }
            AttackMethod::Pgd => {}
        }
        if let Some((lo, hi)) = self.clamp {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Contract(format!("bad clamp range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Crafted adversarial batch with per-example perturbation norms and the
/// prediction-changed flag.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub delta_norms: Vec<Real>,
    pub success: Vec<bool>,
}

/// Elementwise sign with sign(0) = 0.
pub fn sign(t: &Tensor) -> Tensor {
    t.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Project a perturbation onto the closed p-ball of radius epsilon.
/// Interior points are returned unchanged.
pub fn project_to_ball(delta: &Tensor, norm: Norm, epsilon: Real) -> Tensor {
    match norm {
        Norm::L2 => {
            let n = l2_norm(delta.data());
            if n <= epsilon {
                delta.clone()
            } else {
                let s = epsilon / n;
                delta.map(|v| v * s)
            }
        }
        Norm::Linf => delta.map(|v| v.clamp(-epsilon, epsilon)),
    }
}

/// In-place per-example projection. Returns the exact norm of the projected
/// slice: `epsilon` when the projection bound, the measured norm otherwise.
fn project_slice(delta: &mut [Real], norm: Norm, epsilon: Real) -> Real {
    match norm {
        Norm::L2 => {
            let n = l2_norm(delta);
            if n > epsilon {
                let s = epsilon / n;
                for v in delta.iter_mut() {
                    *v *= s;
                }
                epsilon
            } else {
                n
            }
        }
        Norm::Linf => {
            let n = linf_norm(delta);
            if n > epsilon {
                for v in delta.iter_mut() {
                    *v = v.clamp(-epsilon, epsilon);
                }
                epsilon
            } else {
                n
            }
        }
    }
}

/// One-step sign attack (projected into the ball so every norm choice
/// respects its budget).
pub fn fgsm(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdvBatch> {
    if spec.method != AttackMethod::Fgsm {
        return Err(Error::Contract(format!(
            "fgsm called with method {:?}",
            spec.method
        )));
    }
    spec.validate()?;
    let mut eff = spec.clone();
    eff.step = spec.epsilon.max(Real::MIN_POSITIVE);
    let eps = vec![spec.epsilon; x.batch_len()?];
    run_iterative(target, x, labels, &eff, &eps, &Rng::new(0))
}

/// k-step projected attack (IFGSM or PGD per the method field).
pub fn iterative_attack(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &Rng,
) -> Result<AdvBatch> {
    if spec.method == AttackMethod::Fgsm {
        return fgsm(target, x, labels, spec);
    }
    spec.validate()?;
    let eps = vec![spec.epsilon; x.batch_len()?];
    run_iterative(target, x, labels, spec, &eps, rng)
}

/// Iterative attack with an individual budget per example; used when a
/// training method re-attacks at adapted perturbation sizes.
pub fn iterative_attack_with_eps(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    eps: &[Real],
    rng: &Rng,
) -> Result<AdvBatch> {
    spec.validate()?;
    run_iterative(target, x, labels, spec, eps, rng)
}

fn run_iterative(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    eps: &[Real],
    rng: &Rng,
) -> Result<AdvBatch> {
    let m = x.batch_len()?;
    if labels.len() != m || eps.len() != m {
        return Err(Error::Contract(format!(
            "batch of {m} examples with {} labels and {} budgets",
            labels.len(),
            eps.len()
        )));
    }
    let stride = x.example_stride();
    let clean_pred = target.predict(x)?;

    let mut x_adv = x.clone();
    if spec.random_start {
        for (i, &eps_i) in eps.iter().enumerate() {
            let mut r = rng.fork(&[i as u64]);
            let mut noise: Vec<Real> = (0..stride).map(|_| r.uniform(-eps_i, eps_i)).collect();
            project_slice(&mut noise, spec.norm, eps_i);
            let xi = x.example(i);
            let out = x_adv.example_mut(i);
            for c in 0..stride {
                out[c] = xi[c] + noise[c];
            }
            if let Some((lo, hi)) = spec.clamp {
                for v in out.iter_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }

    let mut norms = vec![0.0; m];
    let mut delta = vec![0.0; stride];
    for step_idx in 0..spec.steps {
        let eval = target.loss_grad(&x_adv, labels)?;
        let last = step_idx + 1 == spec.steps;
        for i in 0..m {
            let g = eval.input_grad.example(i);
            let xi = x.example(i);
            let cur = x_adv.example(i);
            match spec.direction {
                StepDirection::Sign => {
                    for c in 0..stride {
                        let d = if g[c] > 0.0 {
                            1.0
                        } else if g[c] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        delta[c] = cur[c] + spec.step * d - xi[c];
                    }
                }
                StepDirection::NormalizedGradient => {
                    let gn = l2_norm(g);
                    let scale = if gn > 0.0 { spec.step / gn } else { 0.0 };
                    for c in 0..stride {
                        delta[c] = cur[c] + scale * g[c] - xi[c];
                    }
                }
            }
            let projected_norm = project_slice(&mut delta, spec.norm, eps[i]);
            let out = x_adv.example_mut(i);
            let mut clamped = false;
            for c in 0..stride {
                let mut v = xi[c] + delta[c];
                if let Some((lo, hi)) = spec.clamp {
                    let cl = v.clamp(lo, hi);
                    clamped |= cl != v;
                    v = cl;
                }
                out[c] = v;
            }
            if last {
                // Clamping can only shrink coordinates toward x, so the
                // projected norm stays an upper bound; report the measured
                // norm in that case and the exact projected norm otherwise.
                norms[i] = if clamped {
                    let d: Vec<Real> = out.iter().zip(xi).map(|(&a, &b)| a - b).collect();
                    spec.norm.of(&d)
                } else {
                    projected_norm
                };
            }
        }
    }

    let adv_pred = target.predict(&x_adv)?;
    let success = adv_pred
        .iter()
        .zip(&clean_pred)
        .map(|(a, c)| a != c)
        .collect();
    Ok(AdvBatch {
        x_adv,
        delta_norms: norms,
        success,
    })
}

/// Rescale an existing perturbation to a new budget, preserving direction.
/// When the new budget equals the current norm the adversarial tensor is
/// returned unchanged; a zero perturbation stays at x.
pub fn rescale_perturbation(
    x: &Tensor,
    x_adv: &Tensor,
    norm: Norm,
    new_epsilon: Real,
    clamp: Option<(Real, Real)>,
) -> Result<Tensor> {
    if x.shape() != x_adv.shape() {
        return Err(Error::Shape(format!(
            "x {:?} vs x_adv {:?}",
            x.shape(),
            x_adv.shape()
        )));
    }
    if new_epsilon < 0.0 {
        return Err(Error::Contract(format!(
            "new epsilon must be nonnegative, got {new_epsilon}"
        )));
    }
    let delta: Vec<Real> = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| a - b)
        .collect();
    let n = norm.of(&delta);
    if n == 0.0 {
        return Ok(x.clone());
    }
    if new_epsilon == n {
        return Ok(x_adv.clone());
    }
    let mut out = Vec::with_capacity(x.len());
    match norm {
        Norm::L2 => {
            let s = new_epsilon / n;
            for (xi, d) in x.data().iter().zip(&delta) {
                out.push(xi + d * s);
            }
        }
        Norm::Linf => {
            if new_epsilon < n {
                for (xi, d) in x.data().iter().zip(&delta) {
                    out.push(xi + d.clamp(-new_epsilon, new_epsilon));
                }
            } else {
                let s = new_epsilon / n;
                for (xi, d) in x.data().iter().zip(&delta) {
                    out.push(xi + d * s);
                }
            }
        }
    }
    if let Some((lo, hi)) = clamp {
        for v in out.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Batch form of [`rescale_perturbation`] driven by per-example budgets;
/// examples whose budget equals their recorded norm are left untouched.
/// Returns the new batch plus the updated per-example norms.
pub fn rescale_batch(
    x: &Tensor,
    adv: &AdvBatch,
    norm: Norm,
    new_eps: &[Real],
    clamp: Option<(Real, Real)>,
) -> Result<(Tensor, Vec<Real>)> {
    let m = x.batch_len()?;
    let stride = x.example_stride();
    let mut out = adv.x_adv.clone();
    let mut norms = adv.delta_norms.clone();
    for i in 0..m {
        if new_eps[i] == adv.delta_norms[i] {
            continue;
        }
        let xi = Tensor::from_parts(
            vec![1, stride],
            x.data()[i * stride..(i + 1) * stride].to_vec(),
        );
        let ai = Tensor::from_parts(
            vec![1, stride],
            adv.x_adv.data()[i * stride..(i + 1) * stride].to_vec(),
        );
        let ri = rescale_perturbation(&xi, &ai, norm, new_eps[i], clamp)?;
        let d: Vec<Real> = ri
            .data()
            .iter()
            .zip(xi.data())
            .map(|(&a, &b)| a - b)
            .collect();
        norms[i] = norm.of(&d);
        out.example_mut(i).copy_from_slice(ri.data());
    }
    Ok((out, norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec, Classifier};
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Loss linear in the input: L_i = w . x_i. Gradient is w for every
    /// example, so ball-constrained maximizers are known in closed form.
    struct LinearLoss {
        w: Vec<Real>,
    }

    impl AttackTarget for LinearLoss {
        fn loss_grad(&self, x: &Tensor, _labels: &[usize]) -> Result<AttackEval> {
            let m = x.batch_len()?;
            let mut losses = Vec::with_capacity(m);
            let mut grad = Vec::with_capacity(x.len());
            for i in 0..m {
                let xi = x.example(i);
                losses.push(xi.iter().zip(&self.w).map(|(&a, &b)| a * b).sum());
                grad.extend_from_slice(&self.w);
            }
            Ok(AttackEval {
                per_example_loss: losses,
                input_grad: Tensor::from_parts(x.shape().to_vec(), grad),
            })
        }

        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok(vec![0; x.batch_len()?])
        }
    }

    #[test]
    fn sign_definition() {
        let t = Tensor::from_vec(vec![-2.5, 0.0, 7.0]);
        assert_eq!(sign(&t).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn project_l2_example() {
        let d = Tensor::from_vec(vec![3.0, 4.0]);
        let p = project_to_ball(&d, Norm::L2, 1.0);
        assert!((p.data()[0] - 0.6).abs() < 1e-12);
        assert!((p.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn project_linf_clips_coordinates() {
        let d = Tensor::from_vec(vec![0.5, -0.2]);
        let p = project_to_ball(&d, Norm::Linf, 0.3);
        assert_eq!(p.data(), &[0.3, -0.2]);
    }

    #[test]
    fn project_interior_point_unchanged_bitwise() {
        let d = Tensor::from_vec(vec![0.1, -0.05, 0.2]);
        for norm in [Norm::L2, Norm::Linf] {
            let p = project_to_ball(&d, norm, 10.0);
            for (a, b) in p.data().iter().zip(d.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn fgsm_single_pixel() {
        let target = LinearLoss { w: vec![2.0] };
        let x = Tensor::from_parts(vec![1, 1], vec![0.5]);
        let spec = AttackSpec::fgsm(Norm::Linf, 0.1);
        let adv = fgsm(&target, &x, &[0], &spec).unwrap();
        assert!((adv.x_adv.data()[0] - 0.6).abs() < 1e-12);
        assert!((adv.delta_norms[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fgsm_zero_gradient_is_identity() {
        let target = LinearLoss { w: vec![0.0, 0.0] };
        let x = Tensor::from_parts(vec![1, 2], vec![0.4, 0.7]);
        let spec = AttackSpec::fgsm(Norm::Linf, 0.1);
        let adv = fgsm(&target, &x, &[0], &spec).unwrap();
        assert_eq!(adv.x_adv.data(), x.data());
        assert_eq!(adv.delta_norms[0], 0.0);
    }

    #[test]
    fn fgsm_never_decreases_linear_loss() {
        let target = LinearLoss {
            w: vec![1.5, -2.0, 0.3],
        };
        let x = Tensor::from_parts(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.0, 0.9]);
        let before = target.loss_grad(&x, &[0, 0]).unwrap().per_example_loss;
        let spec = AttackSpec::fgsm(Norm::Linf, 0.2);
        let adv = fgsm(&target, &x, &[0, 0], &spec).unwrap();
        let after = target
            .loss_grad(&adv.x_adv, &[0, 0])
            .unwrap()
            .per_example_loss;
        for (b, a) in before.iter().zip(&after) {
            assert!(a >= b);
        }
    }

    #[test]
    fn pgd_one_step_equals_fgsm_bitwise() {
        let target = LinearLoss {
            w: vec![0.7, -0.1, 0.0, 2.0],
        };
        let x = Tensor::from_parts(vec![1, 4], vec![0.1, 0.9, 0.5, 0.25]);
        let f = fgsm(&target, &x, &[0], &AttackSpec::fgsm(Norm::Linf, 0.3)).unwrap();
        let mut spec = AttackSpec::pgd(Norm::Linf, 0.3, 0.3, 1);
        spec.random_start = false;
        let p = iterative_attack(&target, &x, &[0], &spec, &Rng::new(1)).unwrap();
        for (a, b) in f.x_adv.data().iter().zip(p.x_adv.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn linear_l2_pgd_reaches_ball_boundary_maximizer() {
        let w = vec![3.0, -4.0];
        let target = LinearLoss { w: w.clone() };
        let x = Tensor::from_parts(vec![1, 2], vec![0.2, -0.1]);
        let eps = 0.5;
        let wn = l2_norm(&w);

        // Without random start the iterate walks straight along w/||w||.
        let mut spec = AttackSpec::pgd(Norm::L2, eps, 0.1, 25)
            .with_direction(StepDirection::NormalizedGradient);
        spec.random_start = false;
        let adv = iterative_attack(&target, &x, &[0], &spec, &Rng::new(4)).unwrap();
        for c in 0..2 {
            let expect = x.data()[c] + eps * w[c] / wn;
            assert!(
                (adv.x_adv.data()[c] - expect).abs() < 1e-3,
                "coordinate {c}: {} vs {}",
                adv.x_adv.data()[c],
                expect
            );
        }

        // With random start the loss still converges to the boundary optimum.
        let spec = AttackSpec::pgd(Norm::L2, eps, 0.1, 25)
            .with_direction(StepDirection::NormalizedGradient);
        let adv = iterative_attack(&target, &x, &[0], &spec, &Rng::new(4)).unwrap();
        let best: Real = x
            .data()
            .iter()
            .zip(&w)
            .map(|(&xi, &wi)| xi * wi)
            .sum::<Real>()
            + eps * wn;
        let got = target.loss_grad(&adv.x_adv, &[0]).unwrap().per_example_loss[0];
        assert!(
            (best - got).abs() / best.abs() < 1e-3,
            "loss gap: {got} vs {best}"
        );
    }

    #[test]
    fn rescale_examples_from_contract() {
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        let xa = Tensor::from_vec(vec![0.3, 0.0]);
        let r = rescale_perturbation(&x, &xa, Norm::L2, 0.15, None).unwrap();
        assert!((r.data()[0] - 0.15).abs() < 1e-12);
        assert_eq!(r.data()[1], 0.0);

        // new epsilon equal to the current norm returns x_adv verbatim
        let same = rescale_perturbation(&x, &xa, Norm::L2, l2_norm(&[0.3, 0.0]), None).unwrap();
        assert_eq!(same.data(), xa.data());

        // zero perturbation: any budget returns x
        let r0 = rescale_perturbation(&x, &x, Norm::L2, 0.7, None).unwrap();
        assert_eq!(r0.data(), x.data());
    }

    #[test]
    fn rescale_l2_norm_is_exact() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let x = Tensor::from_vec((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let xa = Tensor::from_vec(
                x.data()
                    .iter()
                    .map(|&v| v + rng.uniform(-0.5, 0.5))
                    .collect(),
            );
            let target = rng.uniform(0.01, 2.0);
            let r = rescale_perturbation(&x, &xa, Norm::L2, target, None).unwrap();
            let d: Vec<Real> = r
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| a - b)
                .collect();
            assert!((l2_norm(&d) - target).abs() < 1e-9);
        }
    }

    #[test]
    fn steps_zero_is_contract_error() {
        let mut spec = AttackSpec::pgd(Norm::L2, 0.3, 0.1, 1);
        spec.steps = 0;
        assert!(matches!(spec.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn iterative_attacks_respect_ball_and_clamp_on_real_model() {
        let arch = ArchSpec::mlp(1, 4, 4, 8, 3).unwrap();
        let params = build_model(&arch, 3).unwrap();
        let target = Classifier {
            arch: &arch,
            params: &params,
        };
        let mut rng = Rng::new(10);
        let x = Tensor::from_parts(vec![4, 1, 4, 4], (0..64).map(|_| rng.next_real()).collect());
        let y = vec![0, 1, 2, 0];
        for norm in [Norm::L2, Norm::Linf] {
            for steps in [1usize, 5] {
                let spec = AttackSpec::pgd(norm, 0.3, 0.15, steps).with_clamp(0.0, 1.0);
                let adv = iterative_attack(&target, &x, &y, &spec, &Rng::new(77)).unwrap();
                for i in 0..4 {
                    let d: Vec<Real> = adv
                        .x_adv
                        .example(i)
                        .iter()
                        .zip(x.example(i))
                        .map(|(&a, &b)| a - b)
                        .collect();
                    assert!(norm.of(&d) <= 0.3 + 1e-6);
                    assert!(adv.delta_norms[i] <= 0.3 + 1e-6);
                }
                assert!(adv.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn more_steps_do_not_reduce_mean_loss_statistically() {
        // Mean loss after k steps should not fall below the 1-step loss for
        // most seeds (per-example monotonicity is not guaranteed).
        let arch = ArchSpec::mlp(1, 3, 3, 6, 2).unwrap();
        let params = build_model(&arch, 21).unwrap();
        let target = Classifier {
            arch: &arch,
            params: &params,
        };
        let mut ok = 0;
        for seed in 0..5u64 {
            let mut rng = Rng::new(100 + seed);
            let x =
                Tensor::from_parts(vec![6, 1, 3, 3], (0..54).map(|_| rng.next_real()).collect());
            let y: Vec<usize> = (0..6).map(|_| rng.below(2)).collect();
            let one = iterative_attack(
                &target,
                &x,
                &y,
                &AttackSpec::ifgsm(Norm::Linf, 0.2, 0.05, 1),
                &Rng::new(0),
            )
            .unwrap();
            let many = iterative_attack(
                &target,
                &x,
                &y,
                &AttackSpec::ifgsm(Norm::Linf, 0.2, 0.05, 7),
                &Rng::new(0),
            )
            .unwrap();
            let mean = |t: &Tensor| {
                target
                    .loss_grad(t, &y)
                    .unwrap()
                    .per_example_loss
                    .iter()
                    .sum::<Real>()
                    / 6.0
            };
            if mean(&many.x_adv) >= mean(&one.x_adv) {
                ok += 1;
            }
        }
        assert!(ok >= 4, "monotone threat held in only {ok}/5 seeds");
    }

    proptest! {
        #[test]
        fn sign_is_odd_and_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let data: Vec<Real> = v.iter().map(|&x| x as Real).collect();
            let t = Tensor::from_vec(data.clone());
            let neg = Tensor::from_vec(data.iter().map(|&x| -x).collect());
            let s = sign(&t);
            let ss = sign(&s);
            let sn = sign(&neg);
            for i in 0..data.len() {
                prop_assert_eq!(s.data()[i], ss.data()[i]);
                prop_assert_eq!(sn.data()[i], -s.data()[i]);
            }
        }

        #[test]
        fn projection_always_lands_in_ball(
            v in proptest::collection::vec(-5.0f64..5.0, 1..12),
            eps in 0.0f64..3.0,
            use_l2 in proptest::bool::ANY,
        ) {
            let data: Vec<Real> = v.iter().map(|&x| x as Real).collect();
            let t = Tensor::from_vec(data);
            let norm = if use_l2 { Norm::L2 } else { Norm::Linf };
            let p = project_to_ball(&t, norm, eps as Real);
            prop_assert!(norm.of(p.data()) <= eps as Real + 1e-9);
        }
    }
}
