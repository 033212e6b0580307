//! NPY array files as numeric series.

use std::path::Path;

use npyz::NpyFile;

/// Reads a 0-d or 1-d numeric array as `f64`s. Floating, signed and
/// unsigned integer and boolean dtypes are accepted.
pub fn read_series(path: &Path) -> Result<Vec<f64>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let file = NpyFile::new(&bytes[..]).map_err(|e| format!("not a valid NPY file: {e}"))?;
    if file.shape().len() > 1 {
        return Err(format!("expected a one-dimensional array, found shape {:?}", file.shape()));
    }
    let file = match file.try_data::<f64>() {
        Ok(r) => return collect(r),
        Err(f) => f,
    };
    let file = match file.try_data::<f32>() {
        Ok(r) => return collect(r).map(widen),
        Err(f) => f,
    };
    let file = match file.try_data::<i64>() {
        Ok(r) => return collect(r).map(widen),
        Err(f) => f,
    };
    let file = match file.try_data::<i32>() {
        Ok(r) => return collect(r).map(widen),
        Err(f) => f,
    };
    let file = match file.try_data::<u64>() {
        Ok(r) => return collect(r).map(widen),
        Err(f) => f,
    };
    let file = match file.try_data::<u32>() {
        Ok(r) => return collect(r).map(widen),
        Err(f) => f,
    };
    let file = match file.try_data::<bool>() {
        Ok(r) => return collect(r).map(|v| v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()),
        Err(f) => f,
    };
    Err(format!("unsupported dtype {}", file.dtype().descr()))
}

fn collect<T: npyz::Deserialize, R: std::io::Read>(reader: npyz::NpyReader<T, R>) -> Result<Vec<T>, String> {
    reader.collect::<Result<Vec<T>, _>>().map_err(|e| format!("truncated or corrupt data: {e}"))
}

fn widen<T: AsF64>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(AsF64::as_f64).collect()
}

trait AsF64 {
    fn as_f64(self) -> f64;
}

macro_rules! as_f64 {
    ($($t:ty),*) => {$(impl AsF64 for $t { fn as_f64(self) -> f64 { self as f64 } })*};
}
as_f64!(f32, i64, i32, u64, u32);

/// Writes a little-endian `f64` vector as NPY v1.
pub fn write_series(path: &Path, values: &[f64]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    npyz::to_file_1d(path, values.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("val_loss.npy");
        write_series(&p, &[0.9, 0.5, 0.4]).unwrap();
        assert_eq!(read_series(&p).unwrap(), vec![0.9, 0.5, 0.4]);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        std::fs::write(&p, b"garbage").unwrap();
        assert!(read_series(&p).is_err());
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_series(&p).is_err());
    }
}
