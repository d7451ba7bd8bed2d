//! Trained-model file: config echo, parameter records and bank records.
//!
//! ```text
//! COSEG-MODEL v1
//! [config]
//! key=value ...
//! [params]
//! <tensor records>
//! [bank]
//! <tensor records>
//! ```

use coseg_core::model::{BasePrototypeBank, CosegParams};
use coseg_core::tensorops::layers::Module;
use coseg_core::tensorops::serialize::{load_params, read_records, write_params, write_record};
use coseg_core::tensorops::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

const MAGIC: &str = "COSEG-MODEL v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub config: RunConfig,
    pub params: CosegParams,
    pub bank: BasePrototypeBank,
}

fn record(text: &mut String, name: &str, t: &Tensor) -> Result<(), CliError> {
    write_record(text, name, t).map_err(CliError::from)
}

impl ModelArtifact {
    pub fn to_text(&self) -> Result<String, CliError> {
        let mut out = format!("{MAGIC}\n[config]\n{}[params]\n", self.config.to_text());
        out.push_str(&write_params(self.params.params())?);
        out.push_str("[bank]\n");
        let bank = &self.bank;
        let n = bank.len();
        let ids = bank.class_ids().iter().map(|&c| f64::from(c)).collect();
        record(&mut out, "bank.class_ids", &Tensor::new(vec![n], ids)?)?;
        record(&mut out, "bank.prototypes", bank.prototypes())?;
        let counts = bank.update_counts().iter().map(|&c| c as f64).collect();
        record(
            &mut out,
            "bank.update_counts",
            &Tensor::new(vec![n], counts)?,
        )?;
        record(&mut out, "bank.momentum", &Tensor::scalar(bank.momentum()))?;
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(format!("missing `{MAGIC}` header"));
        }
        let mut sections: Vec<(&str, String)> = Vec::new();
        for line in lines {
            if line.starts_with('[') && line.ends_with(']') {
                sections.push((line, String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push_str(line);
                body.push('\n');
            } else {
                return Err("content before the first section".into());
            }
        }
        let section = |name: &str| {
            sections
                .iter()
                .find(|(h, _)| *h == name)
                .map(|(_, b)| b.as_str())
                .ok_or_else(|| format!("missing {name} section"))
        };
        let config = RunConfig::from_text(section("[config]")?).map_err(|e| e.to_string())?;
        let bank_records = read_records(section("[bank]")?).map_err(|e| e.to_string())?;
        let get = |name: &str| {
            bank_records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| format!("missing record {name}"))
        };
        let class_ids: Vec<i32> = get("bank.class_ids")?
            .data()
            .iter()
            .map(|&v| v as i32)
            .collect();
        let counts: Vec<u64> = get("bank.update_counts")?
            .data()
            .iter()
            .map(|&v| v as u64)
            .collect();
        let momentum = get("bank.momentum")?
            .data()
            .first()
            .copied()
            .ok_or("empty momentum record")?;
        let bank = BasePrototypeBank::from_parts(
            class_ids,
            get("bank.prototypes")?.clone(),
            counts,
            momentum,
        )
        .map_err(|e| e.to_string())?;

        let mut params = CosegParams::from_seed(config.model_config(bank.len()), 0)
            .map_err(|e| e.to_string())?;
        let records = read_records(section("[params]")?).map_err(|e| e.to_string())?;
        if records.len() != params.params().len() {
            return Err(format!(
                "{} parameter records for a model with {} parameters",
                records.len(),
                params.params().len()
            ));
        }
        load_params(params.params_mut(), &records).map_err(|e| e.to_string())?;
        Ok(Self {
            config,
            params,
            bank,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coseg_core::geometry::BinaryMask;

    #[test]
    fn round_trip_is_exact() {
        let config = RunConfig {
            dim: 8,
            n_prototypes: 3,
            hca_layers: 1,
            heads: 2,
            ..RunConfig::default()
        };
        let params = CosegParams::from_seed(config.model_config(2), 5).unwrap();
        let mut bank = BasePrototypeBank::new(vec![1, 3], 8, 0.9).unwrap();
        let f = Tensor::uniform(&[3, 8], 1.0, &mut coseg_core::rng::rng_from_seed(2));
        let masks = [
            BinaryMask::new(vec![true, true, false]),
            BinaryMask::new(vec![false; 3]),
        ];
        bank.update_base_prototypes(&f, &masks, 0.9).unwrap();
        let a = ModelArtifact {
            config,
            params,
            bank,
        };
        let text = a.to_text().unwrap();
        let b = ModelArtifact::from_text(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_text().unwrap(), text);
    }

    #[test]
    fn rejects_damaged_files() {
        assert!(ModelArtifact::from_text("nope").is_err());
        assert!(ModelArtifact::from_text("COSEG-MODEL v1\n[config]\nseed=1\n").is_err());
    }
}
