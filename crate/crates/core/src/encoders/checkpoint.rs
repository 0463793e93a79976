//! Parameter checkpoints: one float64 `.tns` file per tensor plus
//! `params.json` mapping each name to its file and shape.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tensor};
use crate::datamodel::tns::TnsArray;
use crate::error::{create_dir_all, read_json, write_json, Error, Result};

pub const PARAM_INDEX: &str = "params.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

fn file_name(name: &str) -> String {
    format!("{}.tns", name.replace('/', "."))
}

pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    create_dir_all(dir)?;
    let mut index = BTreeMap::new();
    for (_, name, value) in store.iter() {
        let file = file_name(name);
        TnsArray::f64(value.shape().to_vec(), value.data().to_vec()).write(&dir.join(&file))?;
        index.insert(
            name.to_string(),
            ParamEntry {
                file,
                shape: value.shape().to_vec(),
            },
        );
    }
    write_json(&dir.join(PARAM_INDEX), &index)
}

/// Overwrites every parameter of `store` from `dir`. The checkpoint must hold
/// exactly the same names and shapes.
pub fn load_params(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let index_path = dir.join(PARAM_INDEX);
    let index: BTreeMap<String, ParamEntry> = read_json(&index_path)?;
    if index.len() != store.len() {
        return Err(Error::format(
            &index_path,
            format!("checkpoint has {} tensors, model has {}", index.len(), store.len()),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let entry = index
            .get(&name)
            .ok_or_else(|| Error::format(&index_path, format!("missing parameter {name}")))?;
        let path = dir.join(&entry.file);
        let (shape, data) = TnsArray::read(&path)?.into_f64(&path)?;
        if shape != store.value(id).shape() || shape != entry.shape {
            return Err(Error::format(
                &path,
                format!("shape {shape:?} does not match {:?} for {name}", store.value(id).shape()),
            ));
        }
        *store.value_mut(id) = Tensor::new(shape, data);
    }
    Ok(())
}
