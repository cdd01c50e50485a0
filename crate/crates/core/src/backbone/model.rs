//! The uncompressed recommender: item table plus encoder.

use std::path::Path;

use rand::Rng;

use super::{EncoderConfig, EncoderParams, FrozenEncoder, INIT_RANGE};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::checkpoint::{Checkpoint, Dtype};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub cfg: EncoderConfig,
    /// `|V| × N` item embeddings.
    pub table: Tensor,
    pub enc: EncoderParams,
}

impl RecModel {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let table = Tensor::uniform(&[cfg.num_items, cfg.dim], -INIT_RANGE, INIT_RANGE, rng);
        Ok(RecModel {
            cfg: cfg.clone(),
            table,
            enc: EncoderParams::init(cfg, rng),
        })
    }

    pub fn frozen(&self) -> FrozenEncoder<f64> {
        FrozenEncoder::new(&self.cfg, &self.enc)
    }

    pub fn num_params(&self) -> usize {
        self.table.numel() + self.enc.num_params()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "teacher",
            "encoder": self.cfg,
        }));
        ck.insert("table", self.table.clone());
        self.enc.write_into("enc.", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("teacher") {
            return Err(Error::Format("checkpoint is not a teacher model".into()));
        }
        let cfg: EncoderConfig = serde_json::from_value(ck.config["encoder"].clone())?;
        cfg.validate()?;
        let table = ck.get("table")?.clone();
        if table.shape() != [cfg.num_items, cfg.dim] {
            return Err(Error::dim("teacher table", table.shape(), &[cfg.num_items, cfg.dim]));
        }
        Ok(RecModel {
            enc: EncoderParams::read_from("enc.", ck)?,
            cfg,
            table,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.to_checkpoint().save(stem, Dtype::F64)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        RecModel::from_checkpoint(&Checkpoint::load(stem)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = EncoderConfig::new(7, 4, 5);
        let m = RecModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck = m.to_checkpoint();
        let (man, blob) = ck.to_bytes(Dtype::F64).unwrap();
        let back = RecModel::from_checkpoint(&Checkpoint::from_bytes(&man, &blob).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.num_params(), 28 + m.enc.num_params());
    }
}
