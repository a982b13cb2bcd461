//! Mini-batch joint training with validation-GINI model selection, plus the
//! ablation and hyperparameter-sweep drivers built on top of it.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedUser, FeatureSchema, InteractionKind};
use crate::metrics::{evaluate, gini_normalized, recall_at_k, EvalConfig, EvalReport, ScoredUser};
use crate::model::{Architecture, ExpLtv, LossBreakdown, LossWeights, Targets, Variant};
use crate::numerics::Adam;
use crate::synthcohort::{split, Dataset, SplitSpec, Splits, UserRecord};

/// Validation recall is tracked at this cut-off.
pub const LOG_RECALL_K: usize = 500;

/// Shuffling uses this ChaCha stream; initialization uses stream 0.
const SHUFFLE_STREAM: u64 = 1;

/// Human-editable training configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub d1: usize,
    pub hidden: usize,
    /// Dense layers per head. Only two-layer heads are implemented.
    pub layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the LTV loss in the joint objective.
    pub lambda: f64,
    /// Whale threshold R the labels were built with.
    pub r: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-GINI improvement.
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    pub interaction: InteractionKind,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 8,
            d1: 8,
            hidden: 8,
            layers: 2,
            learning_rate: 1e-4,
            batch_size: 128,
            lambda: 15.0,
            r: 300.0,
            epochs: 20,
            patience: 3,
            seed: 0,
            variant: Variant::Full,
            interaction: InteractionKind::Mlp,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.layers != 2 {
            return bad(format!(
                "only 2-layer heads are supported, got layers = {}",
                self.layers
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad(format!("r must be > 0, got {}", self.r));
        }
        if self.d == 0 || self.d1 == 0 || self.hidden == 0 {
            return bad("d, d1 and hidden must be >= 1".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d: self.d,
            d1: self.d1,
            hidden: self.hidden,
            variant: self.variant,
            interaction: self.interaction.clone(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::joint(self.lambda)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Serde(m) => Error::Serde(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training losses over the epoch.
    pub loss: LossBreakdown,
    pub val_gini: f64,
    pub val_recall: Option<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub lambda: f64,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

impl TrainLog {
    pub const HEADER: &'static str =
        "epoch,gwd_loss,ziln_loss,joint_loss,val_gini,val_recall_at_500,optimizer_steps,selected";

    pub fn csv_row(&self, rec: &EpochRecord) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            rec.epoch,
            rec.loss.gwd,
            rec.loss.ziln,
            rec.loss.objective,
            rec.val_gini,
            rec.val_recall
                .map_or_else(|| "undefined".to_string(), |r| r.to_string()),
            rec.steps,
            u8::from(rec.epoch == self.selected_epoch)
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for rec in &self.epochs {
            let _ = writeln!(s, "{}", self.csv_row(rec));
        }
        s
    }

    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }
}

pub struct TrainOutcome {
    pub model: ExpLtv,
    pub log: TrainLog,
    pub config: TrainConfig,
}

fn encode(model: &ExpLtv, records: &[UserRecord]) -> Result<Vec<EncodedUser>> {
    model.encode(records)
}

/// Scores every record with the model.
pub fn score(model: &ExpLtv, records: &[UserRecord]) -> Result<Vec<ScoredUser>> {
    let users = encode(model, records)?;
    let preds = model.predict(&users)?;
    Ok(records
        .iter()
        .zip(preds)
        .map(|(r, p)| ScoredUser {
            user_id: r.user_id,
            ltv_hat: p.ltv,
            p_gw: p.p_gw(),
            p_ptr: p.p_ptr,
            ltv: r.ltv,
            s: u8::from(r.purchased),
            g: u8::from(r.whale),
        })
        .collect())
}

pub fn evaluate_model(model: &ExpLtv, records: &[UserRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate(&score(model, records)?, cfg)
}

struct Validation {
    users: Vec<EncodedUser>,
    ltv: Vec<f64>,
    whales: Vec<bool>,
    ids: Vec<u64>,
}

impl Validation {
    fn new(model: &ExpLtv, records: &[UserRecord]) -> Result<Self> {
        let v = Self {
            users: encode(model, records)?,
            ltv: records.iter().map(|r| r.ltv).collect(),
            whales: records.iter().map(|r| r.whale).collect(),
            ids: records.iter().map(|r| r.user_id).collect(),
        };
        if !v.ltv.iter().any(|&l| l > 0.0) {
            return Err(Error::InvalidInput(
                "validation split has no spenders; GINI undefined".into(),
            ));
        }
        Ok(v)
    }

    fn measure(&self, model: &ExpLtv) -> Result<(f64, Option<f64>)> {
        let preds = model.predict(&self.users)?;
        let ltv_hat: Vec<f64> = preds.iter().map(|p| p.ltv).collect();
        let p_gw: Vec<f64> = preds.iter().map(|p| p.p_gw()).collect();
        let gini = gini_normalized(&ltv_hat, &self.ltv)?;
        let k = LOG_RECALL_K.min(self.users.len());
        let recall = match recall_at_k(&p_gw, &self.whales, &self.ids, k) {
            Ok(r) => Some(r),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((gini, recall))
    }
}

fn batch_loss_mean(
    model: &ExpLtv,
    users: &[EncodedUser],
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let n = users.len() as f64;
    for (chunk, start) in users.chunks(cfg.batch_size).zip((0..).step_by(cfg.batch_size)) {
        let idx: Vec<usize> = (start..start + chunk.len()).collect();
        let b = model.loss(chunk, &targets.select(&idx), cfg.weights())?;
        let w = chunk.len() as f64 / n;
        acc.gwd += w * b.gwd;
        acc.ziln += w * b.ziln;
    }
    acc.objective = acc.gwd + cfg.lambda * acc.ziln;
    Ok(acc)
}

/// Trains on `splits.train`, selecting the epoch with the best validation GINI.
pub fn train(splits: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.valid.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation splits must be nonempty".into(),
        ));
    }
    for part in [&splits.train, &splits.valid, &splits.test] {
        part.check_labels(cfg.r)?;
    }
    let schema = FeatureSchema::fit(&splits.train)?;
    let mut model = ExpLtv::new(cfg.architecture(), schema, cfg.seed)?;
    model.init_output_biases(&splits.train.records);
    let users = encode(&model, &splits.train.records)?;
    let targets = Targets::from_records(&splits.train.records);
    let valid = Validation::new(&model, &splits.valid.records)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut adam = Adam::new(cfg.learning_rate);
    let weights = cfg.weights();

    let (gini0, recall0) = valid.measure(&model)?;
    let mut log = TrainLog {
        lambda: cfg.lambda,
        epochs: vec![EpochRecord {
            epoch: 0,
            loss: batch_loss_mean(&model, &users, &targets, cfg)?,
            val_gini: gini0,
            val_recall: recall0,
            steps: 0,
        }],
        selected_epoch: 0,
    };
    let mut best = (gini0, model.params.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..users.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String| Error::Diverged { epoch, batch, reason };
            let batch_users: Vec<EncodedUser> = idx.iter().map(|&i| users[i].clone()).collect();
            let b = match model.loss_and_grad(&batch_users, &targets.select(idx), weights) {
                Ok(b) => b,
                Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
                Err(e) => return Err(e),
            };
            let w = idx.len() as f64 / users.len() as f64;
            sum.gwd += w * b.gwd;
            sum.ziln += w * b.ziln;
            adam.step(&mut model.params);
            if !model.params.all_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
        }
        sum.objective = sum.gwd + cfg.lambda * sum.ziln;
        let (gini, recall) = valid.measure(&model).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                reason: format!("non-finite {what} on validation"),
            },
            other => other,
        })?;
        log::info!("epoch {epoch}: joint {:.6} val_gini {gini:.6}", sum.objective);
        log.epochs.push(EpochRecord {
            epoch,
            loss: sum,
            val_gini: gini,
            val_recall: recall,
            steps: adam.steps(),
        });
        if gini > best.0 {
            best = (gini, model.params.clone());
            log.selected_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    model.params = best.1;
    Ok(TrainOutcome {
        model,
        log,
        config: cfg.clone(),
    })
}

/// Splits `dataset` with `cfg.split` and trains.
pub fn train_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainOutcome, Splits)> {
    let splits = split(dataset, &cfg.split)?;
    Ok((train(&splits, cfg)?, splits))
}

/// Trains `variant` with everything else from `cfg` and evaluates on the test split.
pub fn run_ablation(
    variant: Variant,
    splits: &Splits,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(EvalReport, TrainOutcome)> {
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let outcome = train(splits, &cfg)?;
    let report = evaluate_model(&outcome.model, &splits.test.records, eval)?.with_label(variant.name());
    Ok((report, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    D,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::D => "d",
        }
    }

    /// Grid used when no values are given.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![4.0, 6.0, 8.0, 10.0, 12.0, 15.0],
            SweepParam::D => vec![4.0, 6.0, 8.0, 10.0, 12.0],
        }
    }

    fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut out = cfg.clone();
        match self {
            SweepParam::Lambda => out.lambda = value,
            SweepParam::D => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "d must be a positive integer, got {value}"
                    )));
                }
                out.d = value as usize;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "d" => Ok(SweepParam::D),
            _ => Err(Error::InvalidInput(format!(
                "unknown sweep parameter `{s}` (expected lambda or d)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub num_params: usize,
    pub selected_epoch: usize,
    pub report: EvalReport,
}

/// One full train/test run per value, all with `cfg.seed`. Runs are independent
/// and execute in parallel.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    splits: &Splits,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    values
        .par_iter()
        .zip(configs)
        .map(|(&value, run_cfg)| {
            let outcome = train(splits, &run_cfg)?;
            let report = evaluate_model(&outcome.model, &splits.test.records, eval)?;
            Ok(SweepRow {
                value,
                seed: run_cfg.seed,
                num_params: outcome.model.num_params(),
                selected_epoch: outcome.log.selected_epoch,
                report: report.with_label(format!("{}={value}", param.name())),
            })
        })
        .collect()
}

/// Sweep table: the parameter value, seed and size, then every report entry.
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    for (i, row) in rows.iter().enumerate() {
        let entries: Vec<(String, String)> = row
            .report
            .entries()
            .into_iter()
            .filter(|(k, _)| k != "variant")
            .collect();
        if i == 0 {
            let keys: Vec<&str> = entries.iter().map(|(k, _)| k.as_str()).collect();
            let _ = writeln!(s, "{},seed,num_params,selected_epoch,{}", param.name(), keys.join(","));
        }
        let values: Vec<&str> = entries.iter().map(|(_, v)| v.as_str()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            row.value,
            row.seed,
            row.num_params,
            row.selected_epoch,
            values.join(",")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{generate, CohortSpec};

    fn small_splits(n: usize) -> Splits {
        let data = generate(&CohortSpec {
            n_users: n,
            seed: 3,
            purchase_rate: 0.4,
            whale_rate: 0.05,
            ..CohortSpec::default()
        })
        .unwrap();
        split(&data, &SplitSpec::default()).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = quick();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("lambda = 4.0\nvariant = \"nssb\"\n").unwrap();
        assert_eq!(partial.lambda, 4.0);
        assert_eq!(partial.variant, Variant::Nssb);
        assert!(TrainConfig::from_toml("lamda = 4.0").is_err());
        assert!(TrainConfig::from_toml("variant = \"mmoe\"").is_err());
        assert!(TrainConfig::from_toml("lambda = -1.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }

    #[test]
    fn loss_decomposition_holds_every_epoch() {
        let splits = small_splits(1500);
        let out = train(&splits, &quick()).unwrap();
        for rec in &out.log.epochs {
            let l = rec.loss;
            assert!((l.objective - (l.gwd + 15.0 * l.ziln)).abs() <= 1e-9 * l.objective.abs().max(1.0));
        }
        assert_eq!(out.log.epochs.len(), 3);
        let csv = out.log.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(TrainLog::HEADER));
    }

    #[test]
    fn one_batch_one_epoch_is_one_step() {
        let splits = small_splits(300);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10_000,
            ..quick()
        };
        let out = train(&splits, &cfg).unwrap();
        assert_eq!(out.log.epochs.last().unwrap().steps, 1);
    }

    #[test]
    fn selection_prefers_earlier_epoch_on_ties() {
        let splits = small_splits(600);
        // a zero learning rate is rejected, so use one too small to change the ranking
        let cfg = TrainConfig {
            learning_rate: 1e-300,
            epochs: 3,
            patience: 5,
            ..quick()
        };
        let out = train(&splits, &cfg).unwrap();
        assert!(out.log.epochs.iter().all(|e| e.val_gini == out.log.epochs[0].val_gini));
        assert_eq!(out.log.selected_epoch, 0);
    }

    #[test]
    fn patience_stops_training() {
        let splits = small_splits(600);
        let cfg = TrainConfig {
            learning_rate: 1e-300,
            epochs: 10,
            patience: 2,
            ..quick()
        };
        let out = train(&splits, &cfg).unwrap();
        assert_eq!(out.log.epochs.len(), 3);
    }

    #[test]
    fn label_threshold_mismatch_rejected() {
        let splits = small_splits(300);
        let cfg = TrainConfig { r: 50.0, ..quick() };
        assert!(train(&splits, &cfg).is_err());
    }

    #[test]
    fn divergence_reports_location() {
        let splits = small_splits(300);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..quick()
        };
        match train(&splits, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn sweep_param_parsing() {
        assert_eq!("lambda".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
        assert!("lr".parse::<SweepParam>().is_err());
        assert!(SweepParam::D.apply(&quick(), 2.5).is_err());
    }
}
