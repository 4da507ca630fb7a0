use std::fs;
use std::path::Path;

use crate::error::{EsgdError, Result};
use crate::population::ParamVector;

/// Plain-text parameter file: the dimension on the first line, then one
/// value per line in round-trip precision.
pub fn write_model_file(path: &Path, params: &ParamVector) -> Result<()> {
    let mut text = format!("{}\n", params.dim());
    for v in params.iter() {
        text.push_str(&format!("{v:?}\n"));
    }
    super::checkpoint::write_atomic(path, text.as_bytes())
}

pub fn read_model_file(path: &Path) -> Result<ParamVector> {
    let text = fs::read_to_string(path).map_err(|e| EsgdError::io(path, e))?;
    let source_name = path.display().to_string();
    let parse_err = |row: usize, message: String| EsgdError::Parse {
        source_name: source_name.clone(),
        row,
        column: 1,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty model file".into()))?;
    let dim: usize = header
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("bad dimension {header:?}: {e}")))?;
    let mut values = Vec::with_capacity(dim);
    for (i, line) in lines {
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad value {line:?}: {e}")))?;
        values.push(v);
    }
    if values.len() != dim {
        return Err(EsgdError::DimensionMismatch {
            expected: dim,
            got: values.len(),
        });
    }
    Ok(values.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let p: ParamVector = vec![0.1, -1e-300, 3.0, f64::MIN_POSITIVE].into();
        write_model_file(&path, &p).unwrap();
        assert_eq!(read_model_file(&path).unwrap(), p);
    }

    #[test]
    fn wrong_count_and_garbage_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "3\n1.0\n2.0\n").unwrap();
        assert!(matches!(
            read_model_file(&path),
            Err(EsgdError::DimensionMismatch { expected: 3, got: 2 })
        ));
        fs::write(&path, "2\n1.0\nabc\n").unwrap();
        assert!(matches!(read_model_file(&path), Err(EsgdError::Parse { row: 3, .. })));
    }
}
