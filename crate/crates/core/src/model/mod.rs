//! The multi-task graph: a shared purchase-rate head, a game-whale detector
//! whose softmax both decomposes the purchase probability over the entire
//! sample space and gates two zero-inflated lognormal LTV experts.
//!
//! ```text
//!  x ─ embed ─ interact ─ e* ─┬─ ptr head ───── p ──────────┬─ p·y0, (1-p)+p·y1  → KL vs [t, 1-t]
//!                             ├─ detector ───── y = [y0,y1] ┤
//!                             ├─ expert 1 ─ (mu1, s1) ──────┴─ mu = y·mu_e, s = y·s_e → ZILN(p, mu, s)
//!                             └─ expert 2 ─ (mu2, s2)
//! ```
//!
//! Gradients are written by hand; [`ExpLtv::grad_check`] verifies them
//! against central differences.

pub mod labels;
pub mod loss;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    EmbedCache, EmbeddingTables, EncodedUser, FeatureSchema, InteractionCache, InteractionEncoder, InteractionKind,
};
use crate::numerics::{
    grad_check, sigmoid, Activation, GradCheckConfig, GradCheckReport, Matrix, Mlp, MlpCache, ParamStore, Probe, Role,
    SIGMOID_EPS,
};
use crate::synthcohort::UserRecord;
use loss::{bayes_split, cross_entropy_logit, expected_ltv, kl_two_point, mix, ziln_loss, SIGMA_FLOOR};

/// Users per chunk when scoring large inputs.
const SCORE_CHUNK: usize = 2048;

/// Model variant: the full graph or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Single LTV expert; the detector is trained but does not gate.
    Ne,
    /// No purchase-rate factor in the detector: `y` is fitted to `[t, 1-t]` directly.
    Nssb,
    /// Separate purchase heads for the detector and the LTV loss; the
    /// detector-side head gets its own cross-entropy term.
    Sp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Ne, Variant::Nssb, Variant::Sp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ne => "ne",
            Variant::Nssb => "nssb",
            Variant::Sp => "sp",
        }
    }

    pub fn num_experts(self) -> usize {
        if self == Variant::Ne {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{s}` (expected full, ne, nssb or sp)")))
    }
}

/// Sizes and wiring of the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Embedding width per feature group.
    pub d: usize,
    /// Width of the upper-level embedding.
    pub d1: usize,
    /// Hidden width of every two-layer head.
    pub hidden: usize,
    pub variant: Variant,
    #[serde(default)]
    pub interaction: InteractionKind,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d: 8,
            d1: 8,
            hidden: 8,
            variant: Variant::Full,
            interaction: InteractionKind::Mlp,
        }
    }
}

/// Location head (identity output) and scale head (softplus output).
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub mu: Mlp,
    pub sigma: Mlp,
}

/// Relative weights of the two loss families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gwd: f64,
    pub ziln: f64,
}

impl LossWeights {
    /// `L_gwd + lambda · L_ltv`.
    pub fn joint(lambda: f64) -> Self {
        Self { gwd: 1.0, ziln: lambda }
    }
}

/// Per-user supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub ltv: Vec<f64>,
    pub gwptr: Vec<f64>,
}

impl Targets {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a UserRecord>) -> Self {
        let (ltv, gwptr) = records.into_iter().map(|r| (r.ltv, r.gwptr)).unzip();
        Self { ltv, gwptr }
    }

    pub fn len(&self) -> usize {
        self.ltv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ltv.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ltv: idx.iter().map(|&i| self.ltv[i]).collect(),
            gwptr: idx.iter().map(|&i| self.gwptr[i]).collect(),
        }
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub gwd: f64,
    pub ziln: f64,
    /// `weights.gwd · gwd + weights.ziln · ziln`.
    pub objective: f64,
}

/// Everything the model predicts for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p_ptr: f64,
    /// Detector softmax `[p_gw, p_ngw]`.
    pub y: [f64; 2],
    pub p_gwptr: f64,
    pub p_ngwptr: f64,
    pub mu: f64,
    pub sigma: f64,
    pub ltv: f64,
}

impl Prediction {
    /// Whale-ranking key.
    pub fn p_gw(&self) -> f64 {
        self.y[0]
    }
}

/// Activations of one batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    embed: EmbedCache,
    interact: InteractionCache,
    pub e_star: Matrix,
    ptr: MlpCache,
    pub ptr_logit: Vec<f64>,
    pub p_ptr: Vec<f64>,
    /// Detector-side purchase head of the `sp` variant: cache, logits, probabilities.
    ptr_gwd: Option<(MlpCache, Vec<f64>, Vec<f64>)>,
    gwd: MlpCache,
    gate_forced: bool,
    pub y: Vec<[f64; 2]>,
    experts: Vec<(MlpCache, MlpCache)>,
    /// `[expert][user]`.
    pub mu_e: Vec<Vec<f64>>,
    pub sigma_e: Vec<Vec<f64>>,
    sigma_e_floored: Vec<Vec<bool>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    sigma_floored: Vec<bool>,
    pub p_gwptr: Vec<f64>,
    pub p_ngwptr: Vec<f64>,
    pub ltv: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.p_ptr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_ptr.is_empty()
    }

    pub fn prediction(&self, i: usize) -> Prediction {
        Prediction {
            p_ptr: self.p_ptr[i],
            y: self.y[i],
            p_gwptr: self.p_gwptr[i],
            p_ngwptr: self.p_ngwptr[i],
            mu: self.mu[i],
            sigma: self.sigma[i],
            ltv: self.ltv[i],
        }
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        (0..self.len()).map(|i| self.prediction(i)).collect()
    }

    /// ReLU on/off pattern plus every clamp, for kink detection.
    fn pattern(&self) -> Vec<bool> {
        let mut p = Vec::new();
        InteractionEncoder::push_pattern(&self.interact, &mut p);
        self.ptr.push_pattern(&mut p);
        self.gwd.push_pattern(&mut p);
        if let Some((c, _, probs)) = &self.ptr_gwd {
            c.push_pattern(&mut p);
            p.extend(probs.iter().map(|&x| x <= SIGMOID_EPS || x >= 1.0 - SIGMOID_EPS));
        }
        p.extend(self.p_ptr.iter().map(|&x| x <= SIGMOID_EPS || x >= 1.0 - SIGMOID_EPS));
        for (mu, sigma) in &self.experts {
            mu.push_pattern(&mut p);
            sigma.push_pattern(&mut p);
        }
        for f in &self.sigma_e_floored {
            p.extend(f);
        }
        p.extend(&self.sigma_floored);
        p
    }
}

/// Gradients of the objective with respect to every head output.
struct OutputGrads {
    ptr_logit: Vec<f64>,
    ptr_gwd_logit: Vec<f64>,
    y: Vec<[f64; 2]>,
    mu_e: Vec<Vec<f64>>,
    sigma_e: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpLtv {
    pub arch: Architecture,
    pub schema: FeatureSchema,
    pub params: ParamStore,
    embed: EmbeddingTables,
    interact: InteractionEncoder,
    ptr: Mlp,
    ptr_gwd: Option<Mlp>,
    gwd: Mlp,
    experts: Vec<Expert>,
}

fn check_finite(values: &Matrix, head: &str) -> Result<()> {
    if values.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(head.to_string()))
    }
}

impl ExpLtv {
    /// Builds a freshly initialized model; parameter layout depends only on
    /// `arch` and `schema`, values only on `seed`.
    pub fn new(arch: Architecture, schema: FeatureSchema, seed: u64) -> Result<Self> {
        if arch.d == 0 || arch.d1 == 0 || arch.hidden == 0 {
            return Err(Error::InvalidInput("d, d1 and hidden must all be >= 1".into()));
        }
        schema.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = EmbeddingTables::new(&mut store, &schema, arch.d, &mut rng);
        if embed.output_dim() == 0 {
            return Err(Error::InvalidInput("feature schema has no features".into()));
        }
        let interact = InteractionEncoder::new(
            &arch.interaction,
            &mut store,
            embed.output_dim(),
            arch.hidden,
            arch.d1,
            &mut rng,
        );
        let (d1, h) = (arch.d1, arch.hidden);
        let ptr_role = match arch.variant {
            Variant::Full | Variant::Ne => Role::DetectorAndLtv,
            Variant::Nssb | Variant::Sp => Role::Ltv,
        };
        let ptr = Mlp::new(&mut store, "ptr", ptr_role, d1, h, 1, Activation::Identity, &mut rng);
        let ptr_gwd = (arch.variant == Variant::Sp).then(|| {
            Mlp::new(
                &mut store,
                "ptr_gwd",
                Role::Detector,
                d1,
                h,
                1,
                Activation::Identity,
                &mut rng,
            )
        });
        let gwd = Mlp::new(
            &mut store,
            "gwd",
            Role::Detector,
            d1,
            h,
            2,
            Activation::Softmax,
            &mut rng,
        );
        let experts = (0..arch.variant.num_experts())
            .map(|k| Expert {
                mu: Mlp::new(
                    &mut store,
                    &format!("expert{}.mu", k + 1),
                    Role::Ltv,
                    d1,
                    h,
                    1,
                    Activation::Identity,
                    &mut rng,
                ),
                sigma: Mlp::new(
                    &mut store,
                    &format!("expert{}.sigma", k + 1),
                    Role::Ltv,
                    d1,
                    h,
                    1,
                    Activation::Softplus,
                    &mut rng,
                ),
            })
            .collect();
        Ok(Self {
            arch,
            schema,
            params: store,
            embed,
            interact,
            ptr,
            ptr_gwd,
            gwd,
            experts,
        })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn encode(&self, records: &[UserRecord]) -> Result<Vec<EncodedUser>> {
        records.iter().map(|r| self.schema.encode(r)).collect()
    }

    /// Forward pass on this model's parameters.
    pub fn forward(&self, users: &[EncodedUser]) -> Result<ForwardTrace> {
        self.forward_in(&self.params, users, None)
    }

    /// Forward pass with the detector output replaced by `gate` for every user.
    pub fn forward_with_gate(&self, users: &[EncodedUser], gate: [f64; 2]) -> Result<ForwardTrace> {
        self.forward_in(&self.params, users, Some(gate))
    }

    fn forward_in(&self, store: &ParamStore, users: &[EncodedUser], gate: Option<[f64; 2]>) -> Result<ForwardTrace> {
        let n = users.len();
        let (e, embed_cache) = self.embed.forward_cached(store, users)?;
        check_finite(&e, "embedding layer")?;
        let (e_star, interact_cache) = self.interact.forward_cached(store, &e)?;
        check_finite(&e_star, "interaction layer")?;

        let ptr_cache = self.ptr.forward_cached(store, &e_star)?;
        check_finite(ptr_cache.out(), "purchase-rate head")?;
        let ptr_logit = ptr_cache.out().column(0);
        let p_ptr: Vec<f64> = ptr_logit.iter().map(|&z| sigmoid(z)).collect();

        let ptr_gwd = match &self.ptr_gwd {
            Some(head) => {
                let c = head.forward_cached(store, &e_star)?;
                check_finite(c.out(), "detector-side purchase head")?;
                let logit = c.out().column(0);
                let p: Vec<f64> = logit.iter().map(|&z| sigmoid(z)).collect();
                Some((c, logit, p))
            }
            None => None,
        };

        let gwd_cache = self.gwd.forward_cached(store, &e_star)?;
        check_finite(gwd_cache.out(), "game-whale detector")?;
        let y: Vec<[f64; 2]> = match gate {
            Some(g) => vec![g; n],
            None => (0..n)
                .map(|i| [gwd_cache.out().get(i, 0), gwd_cache.out().get(i, 1)])
                .collect(),
        };

        let mut expert_caches = Vec::with_capacity(self.experts.len());
        let mut mu_e = Vec::with_capacity(self.experts.len());
        let mut sigma_e = Vec::with_capacity(self.experts.len());
        let mut sigma_e_floored = Vec::with_capacity(self.experts.len());
        for (k, expert) in self.experts.iter().enumerate() {
            let mc = expert.mu.forward_cached(store, &e_star)?;
            check_finite(mc.out(), &format!("expert {} mu head", k + 1))?;
            let sc = expert.sigma.forward_cached(store, &e_star)?;
            check_finite(sc.out(), &format!("expert {} sigma head", k + 1))?;
            mu_e.push(mc.out().column(0));
            let raw = sc.out().column(0);
            sigma_e_floored.push(raw.iter().map(|&s| s < SIGMA_FLOOR).collect());
            sigma_e.push(raw.iter().map(|&s| s.max(SIGMA_FLOOR)).collect::<Vec<_>>());
            expert_caches.push((mc, sc));
        }

        let mut mu = vec![0.0; n];
        let mut sigma = vec![0.0; n];
        let mut sigma_floored = vec![false; n];
        let mut p_gwptr = vec![0.0; n];
        let mut p_ngwptr = vec![0.0; n];
        let mut ltv = vec![0.0; n];
        for i in 0..n {
            let (m, s) = if self.experts.len() == 1 {
                (mu_e[0][i], sigma_e[0][i])
            } else {
                (
                    mix(y[i], [mu_e[0][i], mu_e[1][i]]),
                    mix(y[i], [sigma_e[0][i], sigma_e[1][i]]),
                )
            };
            mu[i] = m;
            sigma_floored[i] = s < SIGMA_FLOOR;
            sigma[i] = s.max(SIGMA_FLOOR);
            let (gw, ngw) = match (self.arch.variant, &ptr_gwd) {
                (Variant::Nssb, _) => (y[i][0], y[i][1]),
                (Variant::Sp, Some((_, _, p))) => bayes_split(p[i], y[i]),
                _ => bayes_split(p_ptr[i], y[i]),
            };
            p_gwptr[i] = gw;
            p_ngwptr[i] = ngw;
            ltv[i] = expected_ltv(p_ptr[i], mu[i], sigma[i]);
            if !ltv[i].is_finite() {
                return Err(Error::NonFinite("expected LTV".into()));
            }
        }

        Ok(ForwardTrace {
            embed: embed_cache,
            interact: interact_cache,
            e_star,
            ptr: ptr_cache,
            ptr_logit,
            p_ptr,
            ptr_gwd,
            gwd: gwd_cache,
            gate_forced: gate.is_some(),
            y,
            experts: expert_caches,
            mu_e,
            sigma_e,
            sigma_e_floored,
            mu,
            sigma,
            sigma_floored,
            p_gwptr,
            p_ngwptr,
            ltv,
        })
    }

    /// Loss components and output gradients for a traced batch.
    fn loss_terms(
        &self,
        trace: &ForwardTrace,
        targets: &Targets,
        weights: LossWeights,
    ) -> Result<(LossBreakdown, OutputGrads, Vec<bool>)> {
        let n = trace.len();
        if targets.len() != n {
            return Err(Error::dim("targets", n, targets.len()));
        }
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let k = self.experts.len();
        let mut g = OutputGrads {
            ptr_logit: vec![0.0; n],
            ptr_gwd_logit: vec![0.0; n],
            y: vec![[0.0; 2]; n],
            mu_e: vec![vec![0.0; n]; k],
            sigma_e: vec![vec![0.0; n]; k],
        };
        let mut clamps = Vec::with_capacity(2 * n);
        let scale = 1.0 / n as f64;
        let (wg, wz) = (weights.gwd * scale, weights.ziln * scale);
        let mut gwd_sum = 0.0;
        let mut ziln_sum = 0.0;

        for i in 0..n {
            let t = targets.gwptr[i];
            let ltv = targets.ltv[i];
            let y = trace.y[i];

            // detector loss
            let kl = kl_two_point(t, trace.p_gwptr[i], trace.p_ngwptr[i])?;
            clamps.extend(kl.clamped);
            gwd_sum += kl.loss;
            match self.arch.variant {
                Variant::Nssb => {
                    g.y[i][0] += wg * kl.d_gw;
                    g.y[i][1] += wg * kl.d_ngw;
                }
                variant => {
                    let p = match (&trace.ptr_gwd, variant) {
                        (Some((_, _, pg)), Variant::Sp) => pg[i],
                        _ => trace.p_ptr[i],
                    };
                    let dp = kl.d_gw * y[0] + kl.d_ngw * (y[1] - 1.0);
                    g.y[i][0] += wg * kl.d_gw * p;
                    g.y[i][1] += wg * kl.d_ngw * p;
                    let d_logit = wg * dp * p * (1.0 - p);
                    if let (Some((_, logits, _)), Variant::Sp) = (&trace.ptr_gwd, variant) {
                        let ce = cross_entropy_logit(logits[i], ltv > 0.0);
                        gwd_sum += ce.loss;
                        g.ptr_gwd_logit[i] += d_logit + wg * ce.d_logit;
                    } else {
                        g.ptr_logit[i] += d_logit;
                    }
                }
            }

            // LTV loss
            let z = ziln_loss(trace.ptr_logit[i], trace.mu[i], trace.sigma[i], ltv)?;
            ziln_sum += z.total();
            g.ptr_logit[i] += wz * z.d_logit;
            let d_mu = wz * z.d_mu;
            let d_sigma = if trace.sigma_floored[i] { 0.0 } else { wz * z.d_sigma };
            if k == 1 {
                g.mu_e[0][i] += d_mu;
                g.sigma_e[0][i] += d_sigma;
            } else {
                for e in 0..2 {
                    g.mu_e[e][i] += d_mu * y[e];
                    g.sigma_e[e][i] += d_sigma * y[e];
                    g.y[i][e] += d_mu * trace.mu_e[e][i] + d_sigma * trace.sigma_e[e][i];
                }
            }
        }
        for (grads, floored) in g.sigma_e.iter_mut().zip(&trace.sigma_e_floored) {
            for (d, &f) in grads.iter_mut().zip(floored) {
                if f {
                    *d = 0.0;
                }
            }
        }
        let gwd = gwd_sum * scale;
        let ziln = ziln_sum * scale;
        let breakdown = LossBreakdown {
            gwd,
            ziln,
            objective: weights.gwd * gwd + weights.ziln * ziln,
        };
        if !breakdown.objective.is_finite() {
            return Err(Error::NonFinite("joint loss".into()));
        }
        Ok((breakdown, g, clamps))
    }

    fn backward_into(
        &self,
        store: &mut ParamStore,
        trace: &ForwardTrace,
        users: &[EncodedUser],
        g: &OutputGrads,
    ) -> Result<()> {
        let n = trace.len();
        let col = |v: &[f64]| Matrix::from_vec(n, 1, v.to_vec());

        let mut d_estar = self.ptr.backward(store, &trace.ptr, &col(&g.ptr_logit)?)?;
        if let (Some(head), Some((cache, _, _))) = (&self.ptr_gwd, &trace.ptr_gwd) {
            d_estar.add_assign(&head.backward(store, cache, &col(&g.ptr_gwd_logit)?)?)?;
        }
        if !trace.gate_forced {
            let d_y = Matrix::from_vec(n, 2, g.y.iter().flat_map(|r| *r).collect())?;
            d_estar.add_assign(&self.gwd.backward(store, &trace.gwd, &d_y)?)?;
        }
        for (k, (expert, (mc, sc))) in self.experts.iter().zip(&trace.experts).enumerate() {
            d_estar.add_assign(&expert.mu.backward(store, mc, &col(&g.mu_e[k])?)?)?;
            d_estar.add_assign(&expert.sigma.backward(store, sc, &col(&g.sigma_e[k])?)?)?;
        }
        let d_embed = self.interact.backward(store, &trace.interact, &d_estar)?;
        self.embed.backward(store, &trace.embed, users, &d_embed)?;
        store.mark_accumulated();
        Ok(())
    }

    /// Batch-mean loss without gradients.
    pub fn loss(&self, users: &[EncodedUser], targets: &Targets, weights: LossWeights) -> Result<LossBreakdown> {
        let trace = self.forward(users)?;
        Ok(self.loss_terms(&trace, targets, weights)?.0)
    }

    /// Forward, loss and backward; gradients are added to the parameter slots.
    pub fn loss_and_grad(
        &mut self,
        users: &[EncodedUser],
        targets: &Targets,
        weights: LossWeights,
    ) -> Result<LossBreakdown> {
        let trace = self.forward(users)?;
        let (breakdown, grads, _) = self.loss_terms(&trace, targets, weights)?;
        let mut store = std::mem::take(&mut self.params);
        let res = self.backward_into(&mut store, &trace, users, &grads);
        self.params = store;
        res.map(|_| breakdown)
    }

    /// Same as [`ExpLtv::loss_and_grad`] with the detector output forced to `gate`.
    pub fn loss_and_grad_with_gate(
        &mut self,
        users: &[EncodedUser],
        targets: &Targets,
        weights: LossWeights,
        gate: [f64; 2],
    ) -> Result<LossBreakdown> {
        let trace = self.forward_with_gate(users, gate)?;
        let (breakdown, grads, _) = self.loss_terms(&trace, targets, weights)?;
        let mut store = std::mem::take(&mut self.params);
        let res = self.backward_into(&mut store, &trace, users, &grads);
        self.params = store;
        res.map(|_| breakdown)
    }

    /// Checks the analytic gradient of the weighted objective on this batch
    /// against central differences. Gradient slots are overwritten.
    pub fn grad_check(
        &mut self,
        users: &[EncodedUser],
        targets: &Targets,
        weights: LossWeights,
        cfg: &GradCheckConfig,
    ) -> Result<GradCheckReport> {
        self.params.zero_grad();
        self.loss_and_grad(users, targets, weights)?;
        self.check_stored_gradients(users, targets, weights, cfg)
    }

    /// Compares whatever is currently in the gradient slots against central differences.
    pub fn check_stored_gradients(
        &mut self,
        users: &[EncodedUser],
        targets: &Targets,
        weights: LossWeights,
        cfg: &GradCheckConfig,
    ) -> Result<GradCheckReport> {
        let mut store = std::mem::take(&mut self.params);
        let report = grad_check(&mut store, cfg, |s| {
            let trace = self.forward_in(s, users, None)?;
            let (b, _, clamps) = self.loss_terms(&trace, targets, weights)?;
            let mut pattern = trace.pattern();
            pattern.extend(clamps);
            Ok(Probe {
                loss: b.objective,
                pattern,
            })
        });
        self.params = store;
        report
    }

    /// Predictions for any number of users, scored in fixed-size chunks.
    pub fn predict(&self, users: &[EncodedUser]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(users.len());
        for chunk in users.chunks(SCORE_CHUNK) {
            out.extend(self.forward(chunk)?.predictions());
        }
        Ok(out)
    }

    /// Upper-level embeddings `e*`, one row per user.
    pub fn embeddings(&self, users: &[EncodedUser]) -> Result<Matrix> {
        let mut rows = Vec::with_capacity(users.len());
        for chunk in users.chunks(SCORE_CHUNK) {
            let e = self.embed.forward(&self.params, chunk)?;
            let e_star = self.interact.forward(&self.params, &e)?;
            for r in 0..e_star.rows() {
                rows.push(e_star.row(r).to_vec());
            }
        }
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.arch.d1));
        }
        Matrix::from_rows(&rows)
    }

    /// Sets output-layer biases from label statistics of the training data:
    /// the purchase head starts at the base purchase rate, expert 1 at the
    /// log-spend moments of whales and expert 2 at those of the other spenders
    /// (a single expert gets all spenders). Groups without data keep zero bias.
    pub fn init_output_biases(&mut self, records: &[UserRecord]) {
        fn moments(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
            let v: Vec<f64> = values.collect();
            if v.is_empty() {
                return None;
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            Some((mean, var.sqrt().max(0.1)))
        }
        let mut set_bias = |name: String, value: f64| {
            if let Some(id) = self.params.find(&name) {
                self.params.block_mut(id).value.fill(value);
            }
        };
        if !records.is_empty() {
            let rate = records.iter().filter(|r| r.purchased).count() as f64 / records.len() as f64;
            let rate = rate.clamp(1e-4, 1.0 - 1e-4);
            let logit = (rate / (1.0 - rate)).ln();
            set_bias("ptr.out.b".into(), logit);
            set_bias("ptr_gwd.out.b".into(), logit);
        }
        let spend = |keep: fn(&UserRecord) -> bool| {
            moments(records.iter().filter(|r| r.purchased && keep(r)).map(|r| r.ltv.ln()))
        };
        let groups = if self.experts.len() == 1 {
            vec![spend(|_| true)]
        } else {
            vec![spend(|r| r.whale), spend(|r| !r.whale)]
        };
        for (k, stats) in groups.into_iter().enumerate() {
            if let Some((mean, sd)) = stats {
                set_bias(format!("expert{}.mu.out.b", k + 1), mean);
                set_bias(format!("expert{}.sigma.out.b", k + 1), softplus_inverse(sd));
            }
        }
    }

    /// Replaces parameter values from `(name, matrix)` pairs; every block must be supplied.
    pub fn load_values(&mut self, values: Vec<(String, Matrix)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint has {} parameter blocks, model expects {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, value) in values {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::SchemaMismatch(format!("unknown parameter block `{name}`")))?;
            let block = self.params.block_mut(id);
            if block.value.shape() != value.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "block `{name}` has shape {:?}, checkpoint has {:?}",
                    block.value.shape(),
                    value.shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint block `{name}`")));
            }
            block.value = value;
        }
        Ok(())
    }
}

/// Softplus inverse, handy for setting a scale head's bias to a target value.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
