//! Checkpoints: one clip-format tensor file per parameter, a CSV of
//! parameter names and the model configuration as JSON. Values are stored
//! at 32-bit precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::clipfile::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::model::{McVivit, ModelConfig};
use crate::scalar::Scalar;

const CONFIG_FILE: &str = "model.json";
const MANIFEST_FILE: &str = "params.csv";
const PARAM_DIR: &str = "params";

#[derive(Debug, Serialize, Deserialize)]
struct ParamRow {
    index: usize,
    name: String,
    file: String,
}

pub fn save_checkpoint<S: Scalar>(dir: &Path, model: &McVivit<S>) -> Result<()> {
    let param_dir = dir.join(PARAM_DIR);
    fs::create_dir_all(&param_dir).map_err(|e| Error::io(&param_dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(model.config())?;
    fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest_path)?;
    let store = model.store();
    for (i, (name, value)) in store.names().iter().zip(store.values()).enumerate() {
        let file = format!("{PARAM_DIR}/{i:04}.mcvv");
        write_tensor(&dir.join(&file), &value.cast())?;
        writer.serialize(ParamRow {
            index: i,
            name: name.clone(),
            file,
        })?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<McVivit<S>> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    let mut model = McVivit::<S>::new(config, 0)?;
    let mut reader = csv::Reader::from_path(dir.join(MANIFEST_FILE))?;
    let rows = reader.deserialize().collect::<Result<Vec<ParamRow>, csv::Error>>()?;
    let names = model.store().names().to_vec();
    if rows.len() != names.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            rows.len(),
            names.len()
        )));
    }
    let mut values = Vec::with_capacity(rows.len());
    for (i, (row, name)) in rows.iter().zip(&names).enumerate() {
        if row.index != i || &row.name != name {
            return Err(Error::Config(format!(
                "checkpoint entry {i} is '{}', model expects '{name}'",
                row.name
            )));
        }
        values.push(read_tensor(&dir.join(&row.file))?.cast());
    }
    model.store_mut().set_values(values)?;
    Ok(model)
}
