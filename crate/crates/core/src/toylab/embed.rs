//! Vocabulary extension: new embedding rows initialized as the mean of the
//! rows of the tokens they decompose into under the original vocabulary.

use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::checkpoint::{Checkpoint, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewRow {
    /// Row index in the extended tensor; rows must be appended in order.
    pub index: usize,
    /// Rows of the original tensor to average.
    pub constituents: Vec<usize>,
}

/// Appends `new_rows` to each 2-D `[vocab, dim]` tensor in `tensor_names`
/// (typically the input embedding and the output head). Original rows are
/// left untouched.
pub fn extend_embeddings(
    base: &Checkpoint,
    tensor_names: &[&str],
    new_rows: &[NewRow],
) -> Result<Checkpoint, ToyError> {
    let err = |msg: String| ToyError::Embedding(msg);
    let mut out = base.clone();
    for &name in tensor_names {
        let t = base.get(name).ok_or_else(|| err(format!("no tensor named {name:?}")))?;
        let (vocab, dim) = match t.shape() {
            [v, d] => (*v, *d),
            s => return Err(err(format!("{name} must be 2-D, got shape {s:?}"))),
        };
        let mut values = t.to_f64_vec();
        values.reserve(new_rows.len() * dim);
        for (j, row) in new_rows.iter().enumerate() {
            if row.index != vocab + j {
                return Err(err(format!(
                    "new row {j} has index {} but must be {} (rows are appended in order)",
                    row.index,
                    vocab + j
                )));
            }
            if row.constituents.is_empty() {
                return Err(err(format!("new row {} has no constituent rows", row.index)));
            }
            if let Some(&bad) = row.constituents.iter().find(|&&c| c >= vocab) {
                return Err(err(format!("constituent row {bad} out of range for {name} with {vocab} rows")));
            }
            let n = row.constituents.len() as f64;
            for k in 0..dim {
                let sum: f64 = row.constituents.iter().map(|&c| values[c * dim + k]).sum();
                values.push(sum / n);
            }
        }
        let extended = Tensor::from_f64_values(vec![vocab + new_rows.len(), dim], t.dtype(), values)?;
        out.set(name, extended)?;
    }
    out.metadata.insert("vocab_extension".into(), new_rows.len().to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::validate_compatible;

    fn base() -> Checkpoint {
        Checkpoint::from_tensors([
            ("embed", Tensor::f32(vec![3, 2], vec![1.0, 3.0, 3.0, 1.0, 0.0, 5.0]).unwrap()),
            ("head", Tensor::f64(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn mean_initialization() {
        let rows = vec![NewRow { index: 3, constituents: vec![2] }, NewRow { index: 4, constituents: vec![0, 1] }];
        let out = extend_embeddings(&base(), &["embed", "head"], &rows).unwrap();
        let e = out.get("embed").unwrap();
        assert_eq!(e.shape(), &[5, 2]);
        assert_eq!(e.to_f64_vec(), vec![1.0, 3.0, 3.0, 1.0, 0.0, 5.0, 0.0, 5.0, 2.0, 2.0]);
        let h = out.get("head").unwrap().to_f64_vec();
        assert_eq!(&h[6..], &[4.0, 5.0, 1.0, 2.0]);

        let other = extend_embeddings(&base(), &["embed", "head"], &rows).unwrap();
        validate_compatible(&out, &other).unwrap();
    }

    #[test]
    fn invalid_rows_rejected() {
        let empty = [NewRow { index: 3, constituents: vec![] }];
        assert!(extend_embeddings(&base(), &["embed"], &empty).is_err());
        let oob = [NewRow { index: 3, constituents: vec![3] }];
        assert!(extend_embeddings(&base(), &["embed"], &oob).is_err());
        let gap = [NewRow { index: 5, constituents: vec![0] }];
        assert!(extend_embeddings(&base(), &["embed"], &gap).is_err());
        assert!(extend_embeddings(&base(), &["nope"], &gap).is_err());
    }
}
