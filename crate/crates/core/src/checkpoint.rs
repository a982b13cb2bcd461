//! Versioned JSON checkpoints: training configuration, fitted feature schema
//! and every parameter block with its role. Floats round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::model::ExpLtv;
use crate::numerics::{Matrix, Role};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBlock {
    pub name: String,
    /// Parameter-set membership; the shared purchase head is stored once with a dual role.
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub schema: FeatureSchema,
    pub blocks: Vec<StoredBlock>,
}

impl Checkpoint {
    pub fn new(model: &ExpLtv, config: &TrainConfig) -> Self {
        let blocks = model
            .params
            .blocks()
            .iter()
            .map(|b| StoredBlock {
                name: b.name.clone(),
                role: b.role,
                rows: b.value.rows(),
                cols: b.value.cols(),
                data: b.value.as_slice().to_vec(),
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            config: config.clone(),
            schema: model.schema.clone(),
            blocks,
        }
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn to_model(&self) -> Result<ExpLtv> {
        if self.version != FORMAT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint format version {} (supported: {FORMAT_VERSION})",
                self.version
            )));
        }
        self.config.validate()?;
        let mut model = ExpLtv::new(self.config.architecture(), self.schema.clone(), self.config.seed)?;
        let mut values = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let id = model
                .params
                .find(&b.name)
                .ok_or_else(|| Error::SchemaMismatch(format!("unknown parameter block `{}`", b.name)))?;
            if model.params.block(id).role != b.role {
                return Err(Error::SchemaMismatch(format!(
                    "block `{}` has role {:?}",
                    b.name, b.role
                )));
            }
            values.push((b.name.clone(), Matrix::from_vec(b.rows, b.cols, b.data.clone())?));
        }
        model.load_values(values)?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Serde(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::synthcohort::{generate, CohortSpec};

    fn model(variant: Variant) -> (ExpLtv, TrainConfig) {
        let data = generate(&CohortSpec {
            n_users: 50,
            ..CohortSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            variant,
            seed: 4,
            ..TrainConfig::default()
        };
        let m = ExpLtv::new(cfg.architecture(), FeatureSchema::fit(&data).unwrap(), cfg.seed).unwrap();
        (m, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let (mut m, cfg) = model(v);
            // awkward values that need all 17 significant digits
            let id = m.params.find("ptr.out.b").unwrap();
            m.params.block_mut(id).value.set(0, 0, 0.1 + 0.2);
            let ck = Checkpoint::new(&m, &cfg);
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_model().unwrap().params, m.params);
        }
    }

    #[test]
    fn mismatches_are_reported() {
        let (m, cfg) = model(Variant::Full);
        let mut ck = Checkpoint::new(&m, &cfg);
        ck.config.variant = Variant::Ne;
        assert!(matches!(ck.to_model(), Err(Error::SchemaMismatch(_))));

        let mut ck = Checkpoint::new(&m, &cfg);
        ck.blocks[0].rows += 1;
        assert!(ck.to_model().is_err());

        let mut ck = Checkpoint::new(&m, &cfg);
        ck.version = 99;
        assert!(matches!(ck.to_model(), Err(Error::SchemaMismatch(_))));

        assert!(Checkpoint::from_json("{\"version\": 1}").is_err());
    }
}
