//! Binary weights file: magic `DUOW`, version `u16`, count `u32`, then per
//! parameter a length-prefixed UTF-8 name, dtype `u8`, rank `u8`, `u32`
//! dims, and the little-endian payload. Loading is strict in both
//! directions: every model parameter must be present, and the file may not
//! carry names the model does not know.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::VisitParams;
use crate::tensor::{Dtype, Element, Shape, Tensor};

const WEIGHTS_MAGIC: &[u8; 4] = b"DUOW";
const WEIGHTS_VERSION: u16 = 1;

/// Writes every parameter and buffer of the model, in visit order.
/// Duplicate parameter names are a model-construction bug and are rejected.
pub fn save_weights<T: Element, M: VisitParams<T> + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
    model.visit_params(&mut |p| entries.push((p.name.clone(), p.value.clone())));
    let mut seen = std::collections::HashSet::new();
    for (name, _) in &entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::format(path, format!("duplicate parameter name '{name}'")));
        }
    }
    save_entries(&entries, path)
}

/// Writes arbitrary named tensors in the same format (used for optimizer
/// state in checkpoints).
pub fn save_entries<T: Element>(entries: &[(String, Tensor<T>)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::format(path, "too many parameters"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::format(path, format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[T::DTYPE.byte(), 4u8])?;
        for d in tensor.shape().dims() {
            let d = u32::try_from(d)
                .map_err(|_| Error::format(path, format!("{name}: dimension exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&T::to_le_bytes_vec(tensor.data()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads all entries of a weights file into name order of appearance.
pub fn load_entries<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::format(path, "bad magic, expected DUOW"));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != WEIGHTS_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        r.read_exact(&mut b2)?;
        let dtype = Dtype::from_byte(b2[0])
            .ok_or_else(|| Error::format(path, format!("{name}: unknown dtype byte {}", b2[0])))?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                path,
                format!("{name}: dtype mismatch, file has {dtype:?}"),
            ));
        }
        if b2[1] != 4 {
            return Err(Error::format(path, format!("{name}: expected rank 4, found {}", b2[1])));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let elem_size = match T::DTYPE {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut payload = vec![0u8; shape.numel() * elem_size];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(path, format!("{name}: truncated payload")))?;
        entries.push((name, Tensor::from_vec(shape, T::from_le_bytes_vec(&payload))));
    }
    Ok(entries)
}

/// Loads a weights file into the model. Every model parameter must appear
/// with a matching shape, and every file entry must belong to the model.
pub fn load_weights<T: Element, M: VisitParams<T> + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    let mut by_name: HashMap<String, Tensor<T>> =
        load_entries(path)?.into_iter().collect();

    let mut failure: Option<Error> = None;
    let mut staged: Vec<(String, Tensor<T>)> = Vec::new();
    model.visit_params(&mut |p| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(&p.name) {
            None => {
                failure = Some(Error::format(
                    path,
                    format!("missing parameter '{}'", p.name),
                ));
            }
            Some(t) if t.shape() != p.value.shape() => {
                failure = Some(Error::format(
                    path,
                    format!(
                        "parameter '{}': expected shape {}, found {}",
                        p.name,
                        p.value.shape(),
                        t.shape()
                    ),
                ));
            }
            Some(t) => staged.push((p.name.clone(), t)),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::format(path, format!("unknown parameter '{name}' in file")));
    }
    let staged: HashMap<String, Tensor<T>> = staged.into_iter().collect();
    model.visit_params(&mut |p| {
        p.value = staged[&p.name].clone();
        p.grad = None;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm2d, Conv2dLayer, Parameter, BN_EPS, BN_MOMENTUM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Small<T: Element> {
        conv: Conv2dLayer<T>,
        bn: BatchNorm2d<T>,
    }

    impl<T: Element> VisitParams<T> for Small<T> {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
            self.conv.visit_params(f);
            self.bn.visit_params(f);
        }
    }

    fn small(seed: u64) -> Small<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Small {
            conv: Conv2dLayer::new("conv", 2, 3, 3, 1, 1, 1, &mut rng),
            bn: BatchNorm2d::new("bn", 3, BN_EPS, BN_MOMENTUM),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.duow");
        let mut a = small(1);
        save_weights(&mut a, &path).unwrap();
        let mut b = small(2);
        load_weights(&mut b, &path).unwrap();

        let mut va = Vec::new();
        a.visit_params(&mut |p| va.push(p.value.data().to_vec()));
        let mut i = 0;
        b.visit_params(&mut |p| {
            assert_eq!(p.value.data(), va[i].as_slice());
            i += 1;
        });
    }

    #[test]
    fn missing_parameter_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.duow");
        let mut a = small(1);
        let mut entries = Vec::new();
        a.visit_params(&mut |p| entries.push((p.name.clone(), p.value.clone())));
        entries.retain(|(n, _)| n != "bn.beta");
        save_entries(&entries, &path).unwrap();
        let err = load_weights(&mut small(2), &path).unwrap_err();
        assert!(err.to_string().contains("missing parameter 'bn.beta'"), "{err}");
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.duow");
        let mut a = small(1);
        let mut entries = Vec::new();
        a.visit_params(&mut |p| entries.push((p.name.clone(), p.value.clone())));
        entries.push(("rogue".to_string(), Tensor::<f32>::scalar(1.0)));
        save_entries(&entries, &path).unwrap();
        let err = load_weights(&mut small(2), &path).unwrap_err();
        assert!(err.to_string().contains("unknown parameter 'rogue'"), "{err}");
    }

    #[test]
    fn transposed_shape_is_reported_with_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.duow");
        let mut a = small(1);
        let mut entries = Vec::new();
        a.visit_params(&mut |p| entries.push((p.name.clone(), p.value.clone())));
        // transpose the conv weight dims (3,2,3,3) -> (2,3,3,3)
        for e in entries.iter_mut() {
            if e.0 == "conv.weight" {
                let data = e.1.data().to_vec();
                e.1 = Tensor::from_vec(Shape::new(2, 3, 3, 3), data);
            }
        }
        save_entries(&entries, &path).unwrap();
        let err = load_weights(&mut small(2), &path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv.weight"), "{msg}");
        assert!(msg.contains("(3,2,3,3)") && msg.contains("(2,3,3,3)"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.duow");
        std::fs::write(&path, b"WHAT").unwrap();
        assert!(load_entries::<f32>(&path).is_err());

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DUOW");
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_entries::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
